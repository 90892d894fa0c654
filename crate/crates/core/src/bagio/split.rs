use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GradeLabel;
use crate::error::{Error, Result};
use crate::util::mix_seed;

/// Cross-validation layout. With `fold_count > 1` the test fraction must equal `1 / fold_count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fold_count: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fold_count: 5,
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fold_count == 0 {
            return Err(Error::Split("fold_count must be >= 1".into()));
        }
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Split(format!("fractions must be non-negative, got {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!("fractions must sum to 1, got {fr:?}")));
        }
        if self.fold_count > 1 && (self.test - 1.0 / self.fold_count as f64).abs() > 1e-9 {
            return Err(Error::Split(format!(
                "test fraction {} inconsistent with {} folds",
                self.test, self.fold_count
            )));
        }
        Ok(())
    }
}

/// Indices into the dataset, each list sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified folds over bag labels. Deterministic given `seed`.
pub fn stratified_kfold(
    labels: &[GradeLabel],
    num_classes: usize,
    spec: &SplitSpec,
    seed: u64,
) -> Result<Vec<Fold>> {
    spec.validate()?;
    let f = spec.fold_count;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, l) in labels.iter().enumerate() {
        let c = l.index();
        if c >= num_classes {
            return Err(Error::Split(format!("label {c} >= {num_classes} classes")));
        }
        by_class[c].push(i);
    }
    for (c, m) in by_class.iter().enumerate() {
        if m.len() < f {
            return Err(Error::Split(format!(
                "class {c} has {} members, fewer than {f} folds",
                m.len()
            )));
        }
    }

    let mut folds = vec![Fold::default(); f];
    let mut offset = 0usize;
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, c as u64));
        members.shuffle(&mut rng);
        let n = members.len();
        let n_val = (n as f64 * spec.val).round() as usize;

        for (k, fold) in folds.iter_mut().enumerate() {
            let (test, rest): (Vec<usize>, Vec<usize>) = if f == 1 {
                let n_test = ((n as f64 * spec.test).round() as usize).min(n);
                (members[..n_test].to_vec(), members[n_test..].to_vec())
            } else {
                let mut test = Vec::new();
                let mut rest = Vec::new();
                for (p, &idx) in members.iter().enumerate() {
                    if (p + offset) % f == k {
                        test.push(idx);
                    } else {
                        rest.push(idx);
                    }
                }
                (test, rest)
            };
            let n_val = n_val.min(rest.len());
            let start = if rest.is_empty() { 0 } else { (k * n_val) % rest.len() };
            for (p, &idx) in rest.iter().enumerate() {
                let rotated = (p + rest.len() - start) % rest.len();
                if rotated < n_val {
                    fold.val.push(idx);
                } else {
                    fold.train.push(idx);
                }
            }
            fold.test.extend(test);
        }
        offset += n;
    }
    for fold in &mut folds {
        fold.train.sort_unstable();
        fold.val.sort_unstable();
        fold.test.sort_unstable();
    }
    Ok(folds)
}
