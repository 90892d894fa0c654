//! Synthetic bags with planted, spatially clustered grade regions.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Bag, GradeLabel, RegionAnnotation};
use crate::error::{Error, Result};
use crate::util::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Number of bags per grade, index = grade code.
    pub class_counts: Vec<usize>,
    /// Inclusive patch-count range per bag.
    pub bag_size: [usize; 2],
    pub feature_dim: usize,
    /// One unit vector per grade (index 0 = normal tissue). Generated orthonormal when absent.
    pub signatures: Option<Vec<Vec<f64>>>,
    /// Per-coordinate standard deviation of isotropic Gaussian noise.
    pub noise_scale: f64,
    /// Fraction of a diseased bag's patches that carry a planted grade signature.
    pub tumor_fraction: f64,
    /// Inclusive range of planted regions per diseased bag.
    pub regions_per_bag: [usize; 2],
    /// Chance that an extra region carries a lower diseased grade than the bag label.
    pub lower_grade_prob: f64,
    /// Grow planted regions as spatially connected blobs; otherwise scatter them.
    pub cluster_planted: bool,
}

impl Default for SynthSpec {
    /// The 200-bag, 4-class benchmark with 10:5:2:1 imbalance.
    fn default() -> Self {
        Self {
            num_classes: 4,
            class_counts: vec![111, 56, 22, 11],
            bag_size: [24, 40],
            feature_dim: 32,
            signatures: None,
            noise_scale: 0.25,
            tumor_fraction: 0.3,
            regions_per_bag: [1, 3],
            lower_grade_prob: 0.5,
            cluster_planted: true,
        }
    }
}

const MIN_SIGNATURE_ANGLE_COS: f64 = 0.5;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSynthSpec(m));
        if self.num_classes < 2 {
            return bad(format!("need >= 2 classes, got {}", self.num_classes));
        }
        if self.num_classes > u8::MAX as usize {
            return bad("too many classes".into());
        }
        if self.class_counts.len() != self.num_classes {
            return bad(format!(
                "{} class counts for {} classes",
                self.class_counts.len(),
                self.num_classes
            ));
        }
        if self.class_counts.iter().sum::<usize>() == 0 {
            return bad("no bags requested".into());
        }
        let [lo, hi] = self.bag_size;
        if lo == 0 || lo > hi {
            return bad(format!("bag_size range {:?} invalid", self.bag_size));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction) {
            return bad(format!("tumor_fraction {} outside [0,1]", self.tumor_fraction));
        }
        if !(0.0..=1.0).contains(&self.lower_grade_prob) {
            return bad(format!("lower_grade_prob {} outside [0,1]", self.lower_grade_prob));
        }
        let [rlo, rhi] = self.regions_per_bag;
        if rlo == 0 || rlo > rhi {
            return bad(format!("regions_per_bag {:?} invalid", self.regions_per_bag));
        }
        let diseased: usize = self.class_counts[1..].iter().sum();
        if diseased > 0 && self.tumor_fraction == 0.0 {
            return bad("diseased bags requested but tumor_fraction is 0".into());
        }
        match &self.signatures {
            Some(sigs) => check_signatures(sigs, self.num_classes, self.feature_dim)?,
            None if self.feature_dim < self.num_classes => {
                return bad(format!(
                    "feature_dim {} too small for {} orthogonal signatures",
                    self.feature_dim, self.num_classes
                ))
            }
            None => {}
        }
        Ok(())
    }
}

fn check_signatures(sigs: &[Vec<f64>], classes: usize, dim: usize) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidSynthSpec(m));
    if sigs.len() != classes {
        return bad(format!("{} signatures for {classes} classes", sigs.len()));
    }
    for (g, s) in sigs.iter().enumerate() {
        if s.len() != dim {
            return bad(format!("signature {g} has length {} != {dim}", s.len()));
        }
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return bad(format!("signature {g} not unit norm ({norm})"));
        }
    }
    for a in 0..classes {
        for b in a + 1..classes {
            let cos: f64 = sigs[a].iter().zip(&sigs[b]).map(|(x, y)| x * y).sum();
            if cos > MIN_SIGNATURE_ANGLE_COS + 1e-9 {
                return bad(format!("signatures {a} and {b} closer than 60 degrees (cos {cos})"));
            }
        }
    }
    Ok(())
}

/// Bag label implied by a planting log: the most severe planted grade, or normal.
pub fn label_from_planted(grades: &[GradeLabel]) -> GradeLabel {
    grades.iter().copied().max().unwrap_or(GradeLabel::NORMAL)
}

/// Generates the dataset described by `spec`. Identical `(spec, seed)` gives identical bags.
pub fn generate_synthetic_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<Bag>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    let signatures = match &spec.signatures {
        Some(s) => s.clone(),
        None => orthonormal_signatures(spec.num_classes, spec.feature_dim, &mut rng),
    };
    let mut grades: Vec<GradeLabel> = spec
        .class_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(GradeLabel(c as u8), n))
        .collect();
    grades.shuffle(&mut rng);

    let width = grades.len().to_string().len().max(4);
    grades
        .par_iter()
        .enumerate()
        .map(|(i, &grade)| {
            let mut bag_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let bag_id = format!("bag_{i:0width$}");
            generate_bag(spec, &signatures, bag_id, grade, &mut bag_rng)
        })
        .collect()
}

fn orthonormal_signatures(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

fn generate_bag(
    spec: &SynthSpec,
    signatures: &[Vec<f64>],
    bag_id: String,
    grade: GradeLabel,
    rng: &mut ChaCha8Rng,
) -> Result<Bag> {
    let n = rng.random_range(spec.bag_size[0]..=spec.bag_size[1]);
    let coords = grow_tissue(n, rng);

    let mut patch_grade = vec![GradeLabel::NORMAL; n];
    let mut annotations = Vec::new();
    if grade != GradeLabel::NORMAL {
        let planted_total = ((spec.tumor_fraction * n as f64).round() as usize).clamp(1, n);
        let regions = rng
            .random_range(spec.regions_per_bag[0]..=spec.regions_per_bag[1])
            .min(planted_total);
        let mut taken = vec![false; n];
        for r in 0..regions {
            let size = planted_total / regions + usize::from(r < planted_total % regions);
            let region_grade = if r > 0 && grade.0 >= 2 && rng.random_bool(spec.lower_grade_prob) {
                GradeLabel(rng.random_range(1..grade.0))
            } else {
                grade
            };
            let members = if spec.cluster_planted {
                grow_region(&coords, &taken, size, rng)
            } else {
                scatter_region(&taken, size, rng)
            };
            if members.is_empty() {
                continue;
            }
            for &m in &members {
                taken[m] = true;
                patch_grade[m] = region_grade;
            }
            annotations.push(RegionAnnotation {
                region_id: format!("r{r}"),
                patch_indices: members,
                region_grade,
            });
        }
    }

    let planted: Vec<GradeLabel> = annotations.iter().map(|a| a.region_grade).collect();
    let label = label_from_planted(&planted);
    debug_assert_eq!(label, grade);

    let d = spec.feature_dim;
    let mut features = Vec::with_capacity(n * d);
    for g in &patch_grade {
        let sig = &signatures[g.index()];
        for &s in sig {
            let noise: f64 = StandardNormal.sample(rng);
            features.push((s + spec.noise_scale * noise) as f32);
        }
    }

    let bag = Bag {
        bag_id,
        grade: label,
        num_classes: spec.num_classes,
        coords,
        feature_dim: d,
        features,
        annotations,
    };
    bag.validate()?;
    Ok(bag)
}

const NEIGHBORS_4: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Random connected blob of `n` grid cells, returned in row-major order.
fn grow_tissue(n: usize, rng: &mut ChaCha8Rng) -> Vec<(u32, u32)> {
    let side = ((n as f64 * 1.5).sqrt().ceil() as i64).max(1) + 2;
    let start = (side / 2, side / 2);
    let mut cells: BTreeSet<(i64, i64)> = BTreeSet::new();
    let mut frontier: Vec<(i64, i64)> = vec![start];
    let mut in_frontier: HashSet<(i64, i64)> = HashSet::from([start]);
    while cells.len() < n {
        // The frontier is never empty: the blob can always grow outward.
        let pick = rng.random_range(0..frontier.len());
        let cell = frontier.swap_remove(pick);
        cells.insert(cell);
        for (dr, dc) in NEIGHBORS_4 {
            let next = (cell.0 + dr, cell.1 + dc);
            if next.0 >= 0 && next.1 >= 0 && !cells.contains(&next) && in_frontier.insert(next) {
                frontier.push(next);
            }
        }
    }
    cells.into_iter().map(|(r, c)| (r as u32, c as u32)).collect()
}

/// Connected region of up to `size` untaken patches grown from a random seed patch.
fn grow_region(coords: &[(u32, u32)], taken: &[bool], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let free: Vec<usize> = (0..coords.len()).filter(|&i| !taken[i]).collect();
    if free.is_empty() {
        return Vec::new();
    }
    let index_of: std::collections::HashMap<(u32, u32), usize> =
        coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let seed = free[rng.random_range(0..free.len())];
    let mut region = BTreeSet::new();
    let mut frontier = vec![seed];
    let mut queued = HashSet::from([seed]);
    let mut cursor = 0;
    while region.len() < size && cursor < frontier.len() {
        let pick = rng.random_range(cursor..frontier.len());
        frontier.swap(cursor, pick);
        let cur = frontier[cursor];
        cursor += 1;
        region.insert(cur);
        let (r, c) = coords[cur];
        for (dr, dc) in NEIGHBORS_4 {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 {
                continue;
            }
            if let Some(&j) = index_of.get(&(nr as u32, nc as u32)) {
                if !taken[j] && queued.insert(j) {
                    frontier.push(j);
                }
            }
        }
    }
    region.into_iter().collect()
}

fn scatter_region(taken: &[bool], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut free: Vec<usize> = (0..taken.len()).filter(|&i| !taken[i]).collect();
    free.shuffle(rng);
    free.truncate(size);
    free.sort_unstable();
    free
}
