use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    auc_low_high, average_precision, confusion_matrix, heatmap, localization, macro_metrics, mcc, pr_curve,
    quadratic_weighted_kappa, render_attention_heatmap, render_pr_curves, render_probability_heatmap, roi_select,
    Flagged, GroupStats, LocalizationReport, MacroMetrics, PrPoint, RoiRule,
};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{predict, ModelParams};
use crate::trainer::PreparedBag;
use crate::util::softmax;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalOptions {
    pub roi_rule: RoiRule,
    /// Fraction of a region's patches that must fall in the ROI (at least one always).
    pub min_overlap: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            roi_rule: RoiRule::MaxNonNormal,
            min_overlap: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagReport {
    pub bag_id: String,
    pub label: usize,
    pub predicted: usize,
    pub bag_scores: Vec<f64>,
    pub attention_raw: Vec<f64>,
    /// Min-max normalized attention.
    pub attention: Vec<f64>,
    pub attention_degenerate: bool,
    pub patch_probs: Vec<Vec<f64>>,
    pub roi: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub correct_grade: GroupStats,
    pub incorrect_grade: GroupStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_bags: usize,
    pub num_classes: usize,
    pub confusion: Vec<Vec<u64>>,
    pub metrics: MacroMetrics,
    pub kappa: Flagged<f64>,
    pub mcc: Flagged<f64>,
    /// Missing when the low- or high-risk group is absent.
    pub auc_low_high: Option<f64>,
    /// One-vs-rest average precision per class.
    pub average_precision: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationSummary>,
    pub bags: Vec<BagReport>,
}

fn rows_to_vec(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl EvalReport {
    /// One-vs-rest precision-recall curve per class over softmaxed bag scores.
    pub fn pr_curves(&self) -> Vec<Vec<PrPoint>> {
        let probs: Vec<Vec<f64>> = self.bags.iter().map(|b| softmax(&b.bag_scores)).collect();
        (0..self.num_classes)
            .map(|c| {
                let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                let pos: Vec<bool> = self.bags.iter().map(|b| b.label == c).collect();
                pr_curve(&s, &pos)
            })
            .collect()
    }
}

/// Runs the model over `bags` in evaluation mode and gathers every metric.
pub fn evaluate(params: &ModelParams, cfg: &TrainConfig, bags: &[PreparedBag], opts: EvalOptions) -> Result<EvalReport> {
    if bags.is_empty() {
        return Err(Error::InvalidParameter("nothing to evaluate".into()));
    }
    let c = params.num_classes();
    let reports: Vec<BagReport> = bags
        .par_iter()
        .map(|b| {
            let pred = predict(params, cfg, &b.features, &b.graph)?;
            let norm = heatmap(&pred.attention);
            let roi = roi_select(&pred.attention, &pred.patch_probs, opts.roi_rule);
            let loc = localization(&roi, &b.annotations, &pred.patch_probs, opts.min_overlap);
            Ok(BagReport {
                bag_id: b.bag_id.clone(),
                label: b.label,
                predicted: pred.grade,
                bag_scores: pred.bag_scores,
                attention_raw: pred.attention,
                attention: norm.value,
                attention_degenerate: norm.degenerate,
                patch_probs: rows_to_vec(&pred.patch_probs),
                roi,
                localization: loc,
            })
        })
        .collect::<Result<_>>()?;

    let truth: Vec<usize> = reports.iter().map(|r| r.label).collect();
    let predicted: Vec<usize> = reports.iter().map(|r| r.predicted).collect();
    let conf = confusion_matrix(&truth, &predicted, c)?;
    let scores: Vec<Vec<f64>> = reports.iter().map(|r| r.bag_scores.clone()).collect();
    let probs: Vec<Vec<f64>> = scores.iter().map(|s| softmax(s)).collect();
    let ap = (0..c)
        .map(|k| {
            let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let pos: Vec<bool> = truth.iter().map(|&y| y == k).collect();
            average_precision(&s, &pos)
        })
        .collect();
    let regions: Vec<_> = reports
        .iter()
        .filter_map(|r| r.localization.as_ref())
        .flat_map(|l| l.regions.iter())
        .collect();
    let localization = (!regions.is_empty()).then(|| LocalizationSummary {
        correct_grade: GroupStats::from_regions(regions.iter().copied().filter(|r| r.predicted_grade == r.region_grade)),
        incorrect_grade: GroupStats::from_regions(
            regions.iter().copied().filter(|r| r.predicted_grade != r.region_grade),
        ),
    });
    Ok(EvalReport {
        num_bags: reports.len(),
        num_classes: c,
        confusion: conf.rows().into_iter().map(|r| r.to_vec()).collect(),
        metrics: macro_metrics(&conf)?,
        kappa: quadratic_weighted_kappa(&conf)?,
        mcc: mcc(&conf)?,
        auc_low_high: auc_low_high(&scores, &truth),
        average_precision: ap,
        localization,
        bags: reports,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.json`, `confusion.csv`, `pr.csv`, `pr.png` and per-bag heatmaps
/// under `heatmaps/`.
pub fn write_eval_outputs(report: &EvalReport, bags: &[PreparedBag], out: &Path, cell: u32) -> Result<()> {
    std::fs::create_dir_all(out.join("heatmaps")).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(report)?)?;

    let mut conf = String::from("truth");
    for k in 0..report.num_classes {
        let _ = write!(conf, ",pred_{k}");
    }
    conf.push('\n');
    for (k, row) in report.confusion.iter().enumerate() {
        let _ = write!(conf, "{k}");
        for v in row {
            let _ = write!(conf, ",{v}");
        }
        conf.push('\n');
    }
    write_text(&out.join("confusion.csv"), &conf)?;

    let curves = report.pr_curves();
    let mut pr = String::from("class,threshold,precision,recall\n");
    for (k, curve) in curves.iter().enumerate() {
        for p in curve {
            let _ = writeln!(pr, "{k},{},{},{}", p.threshold, p.precision, p.recall);
        }
    }
    write_text(&out.join("pr.csv"), &pr)?;
    render_pr_curves(&curves, 400).save(out.join("pr.png"))?;

    for (b, r) in bags.iter().zip(&report.bags) {
        let probs = Array2::from_shape_fn((r.patch_probs.len(), report.num_classes), |(n, k)| r.patch_probs[n][k]);
        render_attention_heatmap(&b.coords, &r.attention, cell)
            .save(out.join("heatmaps").join(format!("{}_attention.png", r.bag_id)))?;
        render_probability_heatmap(&b.coords, &probs, cell)
            .save(out.join("heatmaps").join(format!("{}_probability.png", r.bag_id)))?;
    }
    Ok(())
}
