//! Bag-level metrics, attention heatmaps, ROI selection and localization scoring.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::softmax;

mod localize;
mod render;
mod report;

pub use localize::{heatmap, localization, roi_select, GroupStats, LocalizationReport, RegionResult, RoiRule};
pub use render::{render_attention_heatmap, render_pr_curves, render_probability_heatmap};
pub use report::{evaluate, write_eval_outputs, BagReport, EvalOptions, EvalReport};

/// A value that may have been defined by convention because its formula degenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flagged<T> {
    pub value: T,
    pub degenerate: bool,
}

/// `C x C` counts, rows are ground truth and columns are predictions.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Array2<u64>> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
    }
    let mut m = Array2::zeros((num_classes, num_classes));
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::InvalidParameter(format!("class index out of range: ({t}, {p})")));
        }
        m[[t, p]] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// Fraction of each class's bags predicted correctly (per-class recall).
    pub per_class_accuracy: Vec<f64>,
    /// Classes without ground-truth bags; they contribute 0 to every average.
    pub zero_support: Vec<usize>,
}

fn check_confusion(conf: &Array2<u64>) -> Result<u64> {
    if conf.nrows() != conf.ncols() || conf.nrows() == 0 {
        return Err(Error::Shape(format!("confusion must be square and non-empty, got {:?}", conf.dim())));
    }
    let total: u64 = conf.sum();
    if total == 0 {
        return Err(Error::InvalidParameter("confusion matrix is empty".into()));
    }
    Ok(total)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// One-vs-rest precision, recall and F1 per class, averaged without weights.
pub fn macro_metrics(conf: &Array2<u64>) -> Result<MacroMetrics> {
    check_confusion(conf)?;
    let c = conf.nrows();
    let mut out = MacroMetrics {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        per_class_precision: Vec::with_capacity(c),
        per_class_recall: Vec::with_capacity(c),
        per_class_f1: Vec::with_capacity(c),
        per_class_accuracy: Vec::with_capacity(c),
        zero_support: Vec::new(),
    };
    for k in 0..c {
        let tp = conf[[k, k]] as f64;
        let support = conf.row(k).sum() as f64;
        let predicted = conf.column(k).sum() as f64;
        if support == 0.0 {
            log::warn!("class {k} has no ground-truth bags; its metrics count as 0");
            out.zero_support.push(k);
        }
        let p = ratio(tp, predicted);
        let r = ratio(tp, support);
        let f = ratio(2.0 * p * r, p + r);
        out.per_class_precision.push(p);
        out.per_class_recall.push(r);
        out.per_class_f1.push(f);
        out.per_class_accuracy.push(r);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / c as f64;
    out.precision = mean(&out.per_class_precision);
    out.recall = mean(&out.per_class_recall);
    out.f1 = mean(&out.per_class_f1);
    Ok(out)
}

/// Convenience: macro F1 straight from label vectors.
pub fn macro_f1(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<f64> {
    Ok(macro_metrics(&confusion_matrix(truth, predicted, num_classes)?)?.f1)
}

/// Quadratic-weighted Cohen's kappa. Defined as 0 (flagged) when the expected
/// weighted disagreement vanishes.
pub fn quadratic_weighted_kappa(conf: &Array2<u64>) -> Result<Flagged<f64>> {
    let total = check_confusion(conf)? as f64;
    let c = conf.nrows();
    if c < 2 {
        return Ok(Flagged {
            value: 0.0,
            degenerate: true,
        });
    }
    let rows: Vec<f64> = (0..c).map(|i| conf.row(i).sum() as f64).collect();
    let cols: Vec<f64> = (0..c).map(|j| conf.column(j).sum() as f64).collect();
    let denom_w = ((c - 1) * (c - 1)) as f64;
    let (mut obs, mut exp) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64 - j as f64).powi(2)) / denom_w;
            obs += w * conf[[i, j]] as f64;
            exp += w * rows[i] * cols[j] / total;
        }
    }
    if exp == 0.0 {
        return Ok(Flagged {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Flagged {
        value: 1.0 - obs / exp,
        degenerate: false,
    })
}

/// Multiclass Matthews correlation (Gorodkin's form). 0 and flagged when a
/// marginal term vanishes.
pub fn mcc(conf: &Array2<u64>) -> Result<Flagged<f64>> {
    let s = check_confusion(conf)? as f64;
    let c = conf.nrows();
    let correct: f64 = (0..c).map(|k| conf[[k, k]] as f64).sum();
    let t: Vec<f64> = (0..c).map(|k| conf.row(k).sum() as f64).collect();
    let p: Vec<f64> = (0..c).map(|k| conf.column(k).sum() as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let den = (s * s - pp) * (s * s - tt);
    if den <= 0.0 {
        return Ok(Flagged {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Flagged {
        value: (correct * s - pt) / den.sqrt(),
        degenerate: false,
    })
}

/// Mann-Whitney AUC with midranks for ties. `None` when either class is absent.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Softmax mass on the moderate and poor grades (classes 2 and above).
pub fn high_risk_score(bag_scores: &[f64]) -> f64 {
    softmax(bag_scores).iter().skip(2).sum()
}

/// Low- vs high-risk AUC: well-differentiated bags (grade 1) are negatives,
/// moderate and poor (grades >= 2) positives; normal bags are ignored.
pub fn auc_low_high(bag_scores: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let mut s = Vec::new();
    let mut pos = Vec::new();
    for (scores, &y) in bag_scores.iter().zip(labels) {
        if y == 0 {
            continue;
        }
        s.push(high_risk_score(scores));
        pos.push(y >= 2);
    }
    auc(&s, &pos)
}

/// One point of a precision-recall curve, taken at each distinct score threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall points at decreasing thresholds. Empty when there are no positives.
pub fn pr_curve(scores: &[f64], positive: &[bool]) -> Vec<PrPoint> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if positive[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = k + 1 == order.len() || scores[order[k + 1]] != scores[i];
        if last_of_tie {
            out.push(PrPoint {
                threshold: scores[i],
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / n_pos as f64,
            });
        }
    }
    out
}

/// Step-wise average precision `sum_k (R_k - R_{k-1}) P_k`.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let curve = pr_curve(scores, positive);
    if curve.is_empty() {
        return None;
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for pt in curve {
        ap += (pt.recall - prev) * pt.precision;
        prev = pt.recall;
    }
    Some(ap)
}
