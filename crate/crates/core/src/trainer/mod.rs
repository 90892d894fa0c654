//! Composite objective, training loop with class-balanced sampling and early stopping.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagio::{Bag, ClassBalancedSampler, GradeLabel, RegionAnnotation};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evalkit::macro_f1;
use crate::graphbuild::{build_hybrid_graph, HybridGraph};
use crate::milhead::{ema_prototype_update, grade_loss, PrototypeMode};
use crate::model::{add_diversity_grad, backward, diversity, forward, BagForward, BagLosses, ForwardOptions, LossWeights, ModelParams};
use crate::util::mix_seed;

pub mod gradcheck;
pub mod optim;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, TensorCheck};
pub use optim::AdamW;

/// A bag with its features widened to f64 and its graphs built.
#[derive(Clone, Debug)]
pub struct PreparedBag {
    pub bag_id: String,
    pub label: usize,
    pub num_classes: usize,
    pub features: Array2<f64>,
    pub coords: Vec<(u32, u32)>,
    pub graph: HybridGraph,
    pub annotations: Vec<RegionAnnotation>,
}

impl PreparedBag {
    pub fn new(bag: &Bag, graph: HybridGraph) -> Self {
        Self {
            bag_id: bag.bag_id.clone(),
            label: bag.grade.index(),
            num_classes: bag.num_classes,
            features: bag.feature_matrix(),
            coords: bag.coords.clone(),
            graph,
            annotations: bag.annotations.clone(),
        }
    }
}

/// Builds the graphs of every bag in parallel. Graphs depend only on the frozen
/// features, so this runs once per dataset.
pub fn prepare_bags(bags: &[Bag], cfg: &TrainConfig) -> Result<Vec<PreparedBag>> {
    let dcfg = cfg.diffusion();
    bags.par_iter()
        .map(|b| Ok(PreparedBag::new(b, build_hybrid_graph(b, &dcfg)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub grade: f64,
    pub inter: f64,
    pub intra: f64,
    pub diversity: f64,
    /// Ranking weight in effect after the warm-up ramp.
    pub lambda1: f64,
}

fn finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, value })
    }
}

/// `L = mean_b L_grade + lambda1(epoch) * mean_b (L_inter + L_intra) + lambda2 * L_div`.
pub fn total_loss(bags: &[BagLosses], diversity: f64, cfg: &TrainConfig, epoch: usize) -> Result<LossBreakdown> {
    if bags.is_empty() {
        return Err(Error::InvalidParameter("loss over an empty batch".into()));
    }
    let b = bags.len() as f64;
    let mut out = LossBreakdown {
        lambda1: cfg.lambda1_at(epoch),
        diversity: finite("diversity", diversity)?,
        ..Default::default()
    };
    for l in bags {
        out.grade += finite("grade", l.grade)?;
        out.inter += finite("inter", l.inter)?;
        out.intra += finite("intra", l.intra)?;
    }
    out.grade /= b;
    out.inter /= b;
    out.intra /= b;
    out.total = finite(
        "total",
        out.grade + out.lambda1 * (out.inter + out.intra) + cfg.lambda2 * out.diversity,
    )?;
    Ok(out)
}

/// Dropout and pair-subsampling seed for slot `slot` of optimizer step `step`.
pub fn bag_seed(seed: u64, step: u64, slot: u64) -> u64 {
    mix_seed(mix_seed(seed, step), slot)
}

pub struct BatchResult {
    pub loss: LossBreakdown,
    pub grad: ModelParams,
    pub forwards: Vec<BagForward>,
}

/// Loss and gradient of a batch. Bags run in parallel; the reduction follows batch order.
pub fn batch_gradient(
    params: &ModelParams,
    cfg: &TrainConfig,
    batch: &[&PreparedBag],
    epoch: usize,
    seeds: &[u64],
) -> Result<BatchResult> {
    let lambda1 = cfg.lambda1_at(epoch);
    let b = batch.len() as f64;
    let weights = LossWeights {
        grade: 1.0 / b,
        rank: lambda1 / b,
    };
    let per_bag: Vec<(BagForward, ModelParams)> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(bag, &seed)| {
            let opts = ForwardOptions {
                dropout_seed: Some(seed),
                pair_seed: seed,
            };
            let fwd = forward(params, cfg, &bag.features, &bag.graph, Some(bag.label), opts)?;
            let grad = backward(params, cfg, &fwd, weights)?;
            Ok((fwd, grad))
        })
        .collect::<Result<_>>()?;
    let losses: Vec<BagLosses> = per_bag.iter().map(|(f, _)| f.losses().expect("labelled")).collect();
    let (div, _) = diversity(params, cfg)?;
    let loss = total_loss(&losses, div, cfg, epoch)?;
    let mut grad = params.zeros_like();
    let mut forwards = Vec::with_capacity(per_bag.len());
    for (f, g) in per_bag {
        grad.add_scaled(&g, 1.0);
        forwards.push(f);
    }
    add_diversity_grad(params, cfg, cfg.lambda2, &mut grad);
    Ok(BatchResult { loss, grad, forwards })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda1: f64,
    pub loss_total: f64,
    pub loss_grade: f64,
    pub loss_inter: f64,
    pub loss_intra: f64,
    pub loss_diversity: f64,
    pub val_macro_f1: f64,
    pub val_loss: f64,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lambda1,loss_total,loss_grade,loss_inter,loss_intra,loss_diversity,val_macro_f1,val_loss\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.lambda1,
            e.loss_total,
            e.loss_grade,
            e.loss_inter,
            e.loss_intra,
            e.loss_diversity,
            e.val_macro_f1,
            e.val_loss
        );
    }
    s
}

/// Tracks validation progress. A score improves on a higher macro-F1, or on an equal
/// macro-F1 with a lower validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(f64, f64)>,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn update(&mut self, f1: f64, loss: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((bf, bl)) => f1 > bf || (f1 == bf && loss < bl),
        };
        if improved {
            self.best = Some((f1, loss));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: !improved && self.since_best >= self.patience,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub last: ModelParams,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Evaluation-mode macro-F1 and mean softmax cross-entropy.
pub fn validation_scores(params: &ModelParams, cfg: &TrainConfig, bags: &[PreparedBag]) -> Result<(f64, f64)> {
    let outs: Vec<(usize, f64)> = bags
        .par_iter()
        .map(|b| {
            let f = forward(params, cfg, &b.features, &b.graph, None, ForwardOptions::default())?;
            let (l, _) = grade_loss(&f.bag_scores, b.label, cfg.grade_loss_mode);
            Ok((f.predicted_grade(), l))
        })
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let pred: Vec<usize> = outs.iter().map(|o| o.0).collect();
    let loss = outs.iter().map(|o| o.1).sum::<f64>() / outs.len() as f64;
    Ok((macro_f1(&truth, &pred, params.num_classes())?, loss))
}

/// Trains from seeded initial parameters.
pub fn train(train_bags: &[PreparedBag], val_bags: &[PreparedBag], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let first = train_bags
        .first()
        .ok_or_else(|| Error::InvalidParameter("no training bags".into()))?;
    let init = ModelParams::init(first.features.ncols(), first.num_classes, cfg, cfg.seed);
    train_from(init, train_bags, val_bags, cfg)
}

/// Trains starting from `init`. Model selection uses `val_bags`, or the training bags
/// when no validation split is given.
pub fn train_from(
    init: ModelParams,
    train_bags: &[PreparedBag],
    val_bags: &[PreparedBag],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_bags.is_empty() {
        return Err(Error::InvalidParameter("no training bags".into()));
    }
    let val = if val_bags.is_empty() {
        log::warn!("no validation bags; selecting the checkpoint on training bags");
        train_bags
    } else {
        val_bags
    };
    let labels: Vec<GradeLabel> = train_bags.iter().map(|b| GradeLabel(b.label as u8)).collect();
    let sampler = ClassBalancedSampler::new(&labels, init.num_classes(), cfg.beta_cb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5a3b));
    let mut params = init;
    let mut opt = AdamW::new(params.num_params(), cfg);
    let batches_per_epoch = train_bags.len().div_ceil(cfg.batch_size);

    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val_f1 = f64::NAN;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut step: u64 = 0;

    for epoch in 0..cfg.max_epochs {
        let mut sums = LossBreakdown::default();
        for _ in 0..batches_per_epoch {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.sample(&mut rng)).collect();
            let batch: Vec<&PreparedBag> = idx.iter().map(|&i| &train_bags[i]).collect();
            let seeds: Vec<u64> = (0..batch.len() as u64).map(|s| bag_seed(cfg.seed, step, s)).collect();
            let res = batch_gradient(&params, cfg, &batch, epoch, &seeds).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                    last_good: Box::new(best.clone()),
                },
                other => other,
            })?;
            let mut flat = params.flatten();
            opt.step(&mut flat, &res.grad.flatten());
            params.assign_flat(&flat)?;
            match cfg.prototype_mode {
                PrototypeMode::Learned => params.renormalize_prototypes(),
                PrototypeMode::Ema => {
                    for f in &res.forwards {
                        ema_prototype_update(
                            &mut params.pool.prototypes,
                            &f.scores.hhat,
                            &f.probs,
                            cfg.prototype_momentum,
                            cfg.confidence_threshold,
                        );
                    }
                }
            }
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "parameters became non-finite".into(),
                    last_good: Box::new(best),
                });
            }
            sums.total += res.loss.total;
            sums.grade += res.loss.grade;
            sums.inter += res.loss.inter;
            sums.intra += res.loss.intra;
            sums.diversity += res.loss.diversity;
            sums.lambda1 = res.loss.lambda1;
            step += 1;
        }
        let nb = batches_per_epoch as f64;
        let (val_f1, val_loss) = validation_scores(&params, cfg, val)?;
        log.push(EpochLog {
            epoch,
            lambda1: sums.lambda1,
            loss_total: sums.total / nb,
            loss_grade: sums.grade / nb,
            loss_inter: sums.inter / nb,
            loss_intra: sums.intra / nb,
            loss_diversity: sums.diversity / nb,
            val_macro_f1: val_f1,
            val_loss,
        });
        log::info!("epoch {epoch}: loss {:.5} val macro-F1 {val_f1:.4}", sums.total / nb);
        let d = stopper.update(val_f1, val_loss);
        if d.improved {
            best = params.clone();
            best_epoch = epoch;
            best_val_f1 = val_f1;
        }
        if d.stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_f1,
        last: params,
        log,
        stopped_early,
    })
}
