use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::GradeLabel;
use crate::error::{Error, Result};

/// Effective-number class weights: `w_c ∝ (1 - beta) / (1 - beta^n_c)`, normalized to sum 1.
pub fn class_balanced_weights(class_counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidParameter(format!("beta must be in [0, 1), got {beta}")));
    }
    if class_counts.is_empty() || class_counts.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "class counts must all be >= 1, got {class_counts:?}"
        )));
    }
    let raw: Vec<f64> = class_counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powi(n as i32)))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Draws bag indices: first a class by its balanced weight, then a member uniformly.
#[derive(Clone, Debug)]
pub struct ClassBalancedSampler {
    members: Vec<Vec<usize>>,
    class_weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl ClassBalancedSampler {
    /// `labels[i]` is the grade of bag `i`. Classes with no members get zero weight.
    pub fn new(labels: &[GradeLabel], num_classes: usize, beta: f64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidParameter("sampler needs at least one bag".into()));
        }
        let mut members = vec![Vec::new(); num_classes];
        for (i, l) in labels.iter().enumerate() {
            let c = l.index();
            if c >= num_classes {
                return Err(Error::InvalidParameter(format!("label {c} >= {num_classes} classes")));
            }
            members[c].push(i);
        }
        let present: Vec<usize> = (0..num_classes).filter(|&c| !members[c].is_empty()).collect();
        let counts: Vec<usize> = present.iter().map(|&c| members[c].len()).collect();
        let w = class_balanced_weights(&counts, beta)?;
        let mut class_weights = vec![0.0; num_classes];
        for (&c, &wc) in present.iter().zip(&w) {
            class_weights[c] = wc;
        }
        let dist = WeightedIndex::new(&class_weights)
            .map_err(|e| Error::InvalidParameter(format!("sampler weights: {e}")))?;
        Ok(Self {
            members,
            class_weights,
            dist,
        })
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let c = self.dist.sample(rng);
        let m = &self.members[c];
        m[rng.random_range(0..m.len())]
    }
}
