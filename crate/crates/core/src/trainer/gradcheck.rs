//! Central finite differences against the analytic gradient of the total loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{batch_gradient, total_loss, PreparedBag};
use crate::bagio::{Bag, GradeLabel};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graphbuild::build_hybrid_graph;
use crate::milhead::PrototypeMode;
use crate::model::{diversity, forward, ForwardOptions, ModelParams, StructureSignature};
use crate::util::mix_seed;

pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub patches: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub bags_per_instance: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 5,
            patches: 10,
            feature_dim: 5,
            hidden_dim: 6,
            num_classes: 4,
            bags_per_instance: 2,
            step: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub shape: Vec<usize>,
    /// Largest relative error among coordinates above the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink at every step size tried.
    pub skipped: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: usize,
    /// Bags whose inter-grade term had at least one adjacent pair of present grades.
    pub bags_with_inter_term: usize,
    /// Bags with at least one intra-grade pair.
    pub bags_with_intra_pairs: usize,
    pub tensors: Vec<TensorCheck>,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tensors {
            s.push_str(&format!(
                "{:<20} {:>4} coords  max_rel {:.3e}  max_abs {:.3e}  skipped {:>3}  {}\n",
                t.name,
                t.checked,
                t.max_rel_err,
                t.max_abs_err,
                t.skipped,
                if t.pass { "PASS" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "ranking coverage: {} bags with inter-grade terms, {} with intra-grade pairs\n",
            self.bags_with_inter_term, self.bags_with_intra_pairs
        ));
        s.push_str(if self.pass { "gradcheck PASS\n" } else { "gradcheck FAIL\n" });
        s
    }
}

/// Random tiny bags with graphs and labels.
pub fn random_instance(cfg: &TrainConfig, opts: &GradcheckOptions, seed: u64) -> Result<Vec<PreparedBag>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (opts.patches as f64).sqrt().ceil() as u32 + 1;
    (0..opts.bags_per_instance)
        .map(|b| {
            let mut cells: Vec<(u32, u32)> = (0..side).flat_map(|s| (0..side).map(move |t| (s, t))).collect();
            let mut coords = Vec::with_capacity(opts.patches);
            for _ in 0..opts.patches {
                coords.push(cells.swap_remove(rng.random_range(0..cells.len())));
            }
            let features = (0..opts.patches * opts.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .map(|v: f64| v as f32)
                .collect();
            let bag = Bag {
                bag_id: format!("check_{b}"),
                grade: GradeLabel(rng.random_range(0..opts.num_classes) as u8),
                num_classes: opts.num_classes,
                coords,
                feature_dim: opts.feature_dim,
                features,
                annotations: Vec::new(),
            };
            let graph = build_hybrid_graph(&bag, &cfg.diffusion())?;
            Ok(PreparedBag::new(&bag, graph))
        })
        .collect()
}

/// Seeded initialization with every tensor moved off its special values.
pub fn random_params(feature_dim: usize, num_classes: usize, cfg: &TrainConfig, seed: u64) -> Result<ModelParams> {
    let mut p = ModelParams::init(feature_dim, num_classes, cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9e));
    let mut flat = p.flatten();
    for v in flat.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += 0.3 * n;
    }
    p.assign_flat(&flat)?;
    p.renormalize_prototypes();
    Ok(p)
}

fn loss_and_signature(
    params: &ModelParams,
    cfg: &TrainConfig,
    bags: &[PreparedBag],
    epoch: usize,
    seeds: &[u64],
) -> Result<(f64, Vec<StructureSignature>)> {
    let mut losses = Vec::with_capacity(bags.len());
    let mut sigs = Vec::with_capacity(bags.len());
    for (b, &seed) in bags.iter().zip(seeds) {
        let opts = ForwardOptions {
            dropout_seed: Some(seed),
            pair_seed: seed,
        };
        let f = forward(params, cfg, &b.features, &b.graph, Some(b.label), opts)?;
        losses.push(f.losses().expect("labelled"));
        sigs.push(f.signature());
    }
    let (div, _) = diversity(params, cfg)?;
    Ok((total_loss(&losses, div, cfg, epoch)?.total, sigs))
}

/// Compares analytic and finite-difference gradients on `opts.instances` random
/// instances. Coordinates whose perturbation changes the forward pass's discrete
/// structure are retried at 1/10 and 1/100 of the step, then skipped.
pub fn gradcheck(cfg: &TrainConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.patches > 12 || opts.hidden_dim > 8 || opts.patches < 2 {
        return Err(Error::InvalidParameter(
            "gradcheck expects 2..=12 patches and a hidden size of at most 8".into(),
        ));
    }
    let cfg = TrainConfig {
        d_h: opts.hidden_dim,
        prototype_mode: PrototypeMode::Learned,
        ..cfg.clone()
    };
    cfg.validate()?;
    let epoch = cfg.warmup_epochs;
    let mut tensors: Vec<TensorCheck> = Vec::new();
    let (mut with_inter, mut with_intra) = (0, 0);

    for inst in 0..opts.instances {
        let seed = mix_seed(opts.seed, inst as u64);
        let bags = random_instance(&cfg, opts, seed)?;
        let params = random_params(opts.feature_dim, opts.num_classes, &cfg, seed)?;
        let seeds: Vec<u64> = (0..bags.len() as u64).map(|b| mix_seed(seed, 100 + b)).collect();
        let refs: Vec<&PreparedBag> = bags.iter().collect();
        let analytic = batch_gradient(&params, &cfg, &refs, epoch, &seeds)?.grad.flatten();
        let (_, sig0) = loss_and_signature(&params, &cfg, &bags, epoch, &seeds)?;
        for sig in &sig0 {
            let present: Vec<bool> = sig.members.iter().map(|m| !m.is_empty()).collect();
            with_inter += present.windows(2).any(|w| w[0] && w[1]) as usize;
            with_intra += !sig.pairs.is_empty() as usize;
        }
        let base = params.flatten();
        let layout = params.layout();
        if tensors.is_empty() {
            tensors = layout
                .iter()
                .map(|t| TensorCheck {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    max_rel_err: 0.0,
                    max_abs_err: 0.0,
                    checked: 0,
                    skipped: 0,
                    pass: true,
                })
                .collect();
        }

        let mut probe = params.clone();
        let mut offset = 0;
        for (ti, spec) in layout.iter().enumerate() {
            let size: usize = spec.shape.iter().product();
            for i in offset..offset + size {
                let mut fd = None;
                for h in [opts.step, opts.step / 10.0, opts.step / 100.0] {
                    let mut x = base.clone();
                    x[i] = base[i] + h;
                    probe.assign_flat(&x)?;
                    let (lp, sp) = loss_and_signature(&probe, &cfg, &bags, epoch, &seeds)?;
                    x[i] = base[i] - h;
                    probe.assign_flat(&x)?;
                    let (lm, sm) = loss_and_signature(&probe, &cfg, &bags, epoch, &seeds)?;
                    if sp == sig0 && sm == sig0 {
                        fd = Some((lp - lm) / (2.0 * h));
                        break;
                    }
                }
                let t = &mut tensors[ti];
                let Some(fd) = fd else {
                    t.skipped += 1;
                    continue;
                };
                let a = analytic[i];
                let abs = (a - fd).abs();
                let rel = if abs == 0.0 { 0.0 } else { abs / a.abs().max(fd.abs()) };
                t.checked += 1;
                t.max_abs_err = t.max_abs_err.max(abs);
                if abs >= ABS_TOL {
                    t.max_rel_err = t.max_rel_err.max(rel);
                    if rel >= REL_TOL {
                        t.pass = false;
                    }
                }
            }
            offset += size;
        }
    }
    let pass = tensors.iter().all(|t| t.pass && t.checked > 0);
    Ok(GradcheckReport {
        instances: opts.instances,
        bags_with_inter_term: with_inter,
        bags_with_intra_pairs: with_intra,
        tensors,
        pass,
    })
}
