use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Flagged;
use crate::bagio::RegionAnnotation;
use crate::util::argmax;

/// Min-max normalized attention. A constant input maps to zeros and is flagged.
pub fn heatmap(w: &[f64]) -> Flagged<Vec<f64>> {
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if w.is_empty() || !(hi > lo) {
        return Flagged {
            value: vec![0.0; w.len()],
            degenerate: true,
        };
    }
    Flagged {
        value: w.iter().map(|&v| (v - lo) / (hi - lo)).collect(),
        degenerate: false,
    }
}

/// Which per-patch probability gates ROI membership.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiRule {
    /// Largest probability among the non-normal classes.
    #[default]
    MaxNonNormal,
    /// Probability of the patch's argmax class, whatever it is.
    PredictedClass,
}

/// Of the `ceil(N/4)` highest-attention patches, those whose gating probability
/// exceeds 0.5. Returned in ascending index order.
pub fn roi_select(w: &[f64], probs: &Array2<f64>, rule: RoiRule) -> Vec<usize> {
    let n = w.len();
    let take = n.div_ceil(4);
    let mut roi: Vec<usize> = crate::util::top_k_indices(w, take)
        .into_iter()
        .filter(|&i| {
            let row = probs.row(i);
            let p = match rule {
                RoiRule::MaxNonNormal => row.iter().skip(1).copied().fold(f64::NEG_INFINITY, f64::max),
                RoiRule::PredictedClass => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            p > 0.5
        })
        .collect();
    roi.sort_unstable();
    roi
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionResult {
    pub region_id: String,
    pub region_grade: usize,
    /// Majority of the region's patch argmax classes (ties to the lower grade).
    pub predicted_grade: usize,
    pub covered: bool,
    /// Mean probability of the annotated grade over the region's patches.
    pub saliency: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub regions: usize,
    pub covered: usize,
    pub sensitivity: Option<f64>,
    pub saliency: Option<f64>,
}

impl GroupStats {
    pub fn from_regions<'a>(regions: impl IntoIterator<Item = &'a RegionResult>) -> Self {
        let mut g = GroupStats::default();
        let mut sal = 0.0;
        for r in regions {
            g.regions += 1;
            g.covered += r.covered as usize;
            sal += r.saliency;
        }
        if g.regions > 0 {
            g.sensitivity = Some(g.covered as f64 / g.regions as f64);
            g.saliency = Some(sal / g.regions as f64);
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub correct_grade: GroupStats,
    pub incorrect_grade: GroupStats,
    pub regions: Vec<RegionResult>,
}

/// Scores ROI coverage and confidence per annotated region. A region is covered when
/// at least `max(1, ceil(min_overlap * |region|))` of its patches are in the ROI.
/// `None` without annotations.
pub fn localization(
    roi: &[usize],
    annotations: &[RegionAnnotation],
    probs: &Array2<f64>,
    min_overlap: f64,
) -> Option<LocalizationReport> {
    if annotations.is_empty() {
        return None;
    }
    let roi: BTreeSet<usize> = roi.iter().copied().collect();
    let c = probs.ncols();
    let regions: Vec<RegionResult> = annotations
        .iter()
        .map(|a| {
            let grade = a.region_grade.index();
            let mut votes = vec![0.0; c];
            let mut sal = 0.0;
            let mut hits = 0usize;
            for &n in &a.patch_indices {
                let row = probs.row(n);
                votes[argmax(row.as_slice().expect("contiguous"))] += 1.0;
                sal += row[grade];
                hits += roi.contains(&n) as usize;
            }
            let size = a.patch_indices.len();
            let need = ((min_overlap * size as f64).ceil() as usize).max(1);
            RegionResult {
                region_id: a.region_id.clone(),
                region_grade: grade,
                predicted_grade: argmax(&votes),
                covered: hits >= need,
                saliency: if size == 0 { 0.0 } else { sal / size as f64 },
            }
        })
        .collect();
    Some(LocalizationReport {
        correct_grade: GroupStats::from_regions(regions.iter().filter(|r| r.predicted_grade == r.region_grade)),
        incorrect_grade: GroupStats::from_regions(regions.iter().filter(|r| r.predicted_grade != r.region_grade)),
        regions,
    })
}
