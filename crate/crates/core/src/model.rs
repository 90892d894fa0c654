//! Full bag pipeline: projection, graph layers, pooling head and ranking terms.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attgnn::{
    diversity_loss, diversity_loss_grad, layer_backward, layer_forward, project, project_backward, GnnLayerParams,
    GraphMode, LayerCache, ProjectionCache, ProjectionParams,
};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graphbuild::HybridGraph;
use crate::milhead::{
    attention_backward, attention_weights, bag_likelihood, class_scores, class_scores_backward, grade_loss,
    AttentionCache, PoolParams, PrototypeMode, ScoreCache,
};
use crate::rankloss::{
    grade_prototypes, grade_prototypes_backward, inter_grade_loss, intra_candidates, intra_grade_loss, intra_pairs,
    patch_probs, patch_probs_backward, prototype_attention, prototype_attention_backward, GradePrototypes,
    PrototypeAttention,
};
use crate::util::{argmax, mix_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub proj: ProjectionParams,
    pub layers: Vec<GnnLayerParams>,
    pub pool: PoolParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Random unit rows, mutually orthogonal while `rows <= cols`.
fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut z: Array2<f64> = Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng));
    for i in 0..rows {
        if i < cols {
            for j in 0..i {
                let dot = z.row(i).dot(&z.row(j));
                let prev = z.row(j).to_owned();
                z.row_mut(i).scaled_add(-dot, &prev);
            }
        }
        let nrm = z.row(i).dot(&z.row(i)).sqrt();
        z.row_mut(i).mapv_inplace(|v| v / nrm);
    }
    z
}

impl ModelParams {
    pub fn zeros(feature_dim: usize, hidden_dim: usize, num_layers: usize, num_classes: usize) -> Self {
        Self {
            proj: ProjectionParams::zeros(feature_dim, hidden_dim),
            layers: (0..num_layers).map(|_| GnnLayerParams::zeros(hidden_dim)).collect(),
            pool: PoolParams::zeros(hidden_dim, num_classes),
        }
    }

    /// Seeded initialization: Xavier-uniform matrices, zero biases, identity layer norm,
    /// unit-norm class prototypes.
    pub fn init(feature_dim: usize, num_classes: usize, cfg: &TrainConfig, seed: u64) -> Self {
        let d = cfg.d_h;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1417));
        let mut p = Self::zeros(feature_dim, d, cfg.layers, num_classes);
        p.proj.w1 = xavier(&mut rng, feature_dim, d);
        p.proj.w2 = xavier(&mut rng, d, d);
        for layer in &mut p.layers {
            layer.w_k = xavier(&mut rng, d, d);
            layer.w_v = xavier(&mut rng, d, d);
            layer.w_q_lat = xavier(&mut rng, d, d);
            layer.w_q_spa = xavier(&mut rng, d, d);
            layer.w_att_lat = xavier(&mut rng, d, d);
            layer.w_att_spa = xavier(&mut rng, d, d);
            layer.ln_scale.fill(1.0);
        }
        p.pool.a = xavier(&mut rng, d, 1).column(0).to_owned();
        p.pool.u = xavier(&mut rng, d, d);
        p.pool.prototypes = unit_rows(&mut rng, num_classes, d);
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.proj.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.pool.prototypes.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim(), self.hidden_dim(), self.layers.len(), self.num_classes())
    }

    fn views(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("proj.w1".to_string(), self.proj.w1.view().into_dyn()),
            ("proj.b1".to_string(), self.proj.b1.view().into_dyn()),
            ("proj.w2".to_string(), self.proj.w2.view().into_dyn()),
            ("proj.b2".to_string(), self.proj.b2.view().into_dyn()),
        ];
        for (l, g) in self.layers.iter().enumerate() {
            out.extend([
                (format!("gnn.{l}.w_k"), g.w_k.view().into_dyn()),
                (format!("gnn.{l}.w_v"), g.w_v.view().into_dyn()),
                (format!("gnn.{l}.w_q_lat"), g.w_q_lat.view().into_dyn()),
                (format!("gnn.{l}.w_q_spa"), g.w_q_spa.view().into_dyn()),
                (format!("gnn.{l}.w_att_lat"), g.w_att_lat.view().into_dyn()),
                (format!("gnn.{l}.w_att_spa"), g.w_att_spa.view().into_dyn()),
                (format!("gnn.{l}.ln_scale"), g.ln_scale.view().into_dyn()),
                (format!("gnn.{l}.ln_shift"), g.ln_shift.view().into_dyn()),
            ]);
        }
        out.extend([
            ("pool.a".to_string(), self.pool.a.view().into_dyn()),
            ("pool.u".to_string(), self.pool.u.view().into_dyn()),
            ("cls.prototypes".to_string(), self.pool.prototypes.view().into_dyn()),
        ]);
        out
    }

    fn views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let Self { proj, layers, pool } = self;
        let mut out = vec![
            proj.w1.view_mut().into_dyn(),
            proj.b1.view_mut().into_dyn(),
            proj.w2.view_mut().into_dyn(),
            proj.b2.view_mut().into_dyn(),
        ];
        for g in layers.iter_mut() {
            out.extend([
                g.w_k.view_mut().into_dyn(),
                g.w_v.view_mut().into_dyn(),
                g.w_q_lat.view_mut().into_dyn(),
                g.w_q_spa.view_mut().into_dyn(),
                g.w_att_lat.view_mut().into_dyn(),
                g.w_att_spa.view_mut().into_dyn(),
                g.ln_scale.view_mut().into_dyn(),
                g.ln_shift.view_mut().into_dyn(),
            ]);
        }
        out.extend([
            pool.a.view_mut().into_dyn(),
            pool.u.view_mut().into_dyn(),
            pool.prototypes.view_mut().into_dyn(),
        ]);
        out
    }

    /// Named tensors in serialization order.
    pub fn layout(&self) -> Vec<TensorSpec> {
        self.views()
            .into_iter()
            .map(|(name, v)| TensorSpec {
                name,
                shape: v.shape().to_vec(),
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.views().iter().map(|(_, v)| v.len()).sum()
    }

    /// All parameters, tensor by tensor in row-major order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, v) in self.views() {
            out.extend(v.iter().copied());
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for mut v in self.views_mut() {
            for x in v.iter_mut() {
                *x = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (mut a, (_, b)) in self.views_mut().into_iter().zip(other.views()) {
            a.zip_mut_with(&b, |x, &y| *x += scale * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.views().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Rescales class prototypes to unit norm. Rows already within 1e-12 are left untouched.
    pub fn renormalize_prototypes(&mut self) {
        for mut row in self.pool.prototypes.rows_mut() {
            let nrm = row.dot(&row).sqrt();
            if nrm > 0.0 && (nrm - 1.0).abs() > 1e-12 {
                row /= nrm;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Seed for the dropout mask; `None` runs in evaluation mode.
    pub dropout_seed: Option<u64>,
    /// Seed for subsampling intra-grade pairs.
    pub pair_seed: u64,
}

/// Ranking terms of one labelled bag.
#[derive(Clone, Debug)]
pub struct RankTerms {
    pub protos: GradePrototypes,
    pub proto_att: PrototypeAttention,
    pub inter: f64,
    pub inter_dw: Vec<f64>,
    pub candidates: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub intra: f64,
    pub intra_dw: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BagLosses {
    pub grade: f64,
    pub inter: f64,
    pub intra: f64,
}

#[derive(Clone, Debug)]
pub struct BagForward {
    pub proj: ProjectionCache,
    pub layers: Vec<LayerCache>,
    /// Final patch embeddings.
    pub h: Array2<f64>,
    pub att: AttentionCache,
    pub scores: ScoreCache,
    /// Bag-level class scores `S^T w`.
    pub bag_scores: Array1<f64>,
    /// Row softmax of the patch scores.
    pub probs: Array2<f64>,
    pub label: Option<usize>,
    pub grade_loss: Option<(f64, Array1<f64>)>,
    pub rank: Option<RankTerms>,
}

/// Everything that makes the loss locally non-smooth: ReLU masks, prototype
/// memberships, the intra candidate set and the selected pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructureSignature {
    pub relu: Vec<bool>,
    pub members: Vec<Vec<usize>>,
    pub candidates: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

impl BagForward {
    pub fn losses(&self) -> Option<BagLosses> {
        let (grade, _) = self.grade_loss.as_ref()?;
        let rank = self.rank.as_ref()?;
        Some(BagLosses {
            grade: *grade,
            inter: rank.inter,
            intra: rank.intra,
        })
    }

    pub fn predicted_grade(&self) -> usize {
        argmax(self.bag_scores.as_slice().expect("contiguous"))
    }

    pub fn signature(&self) -> StructureSignature {
        let mut relu: Vec<bool> = self.proj.z1.iter().map(|&v| v > 0.0).collect();
        for l in &self.layers {
            relu.extend(l.fuse.y.iter().map(|&v| v > 0.0));
        }
        relu.extend(self.scores.raw.iter().map(|&v| v > 0.0));
        let (members, candidates, pairs) = match &self.rank {
            Some(r) => (r.protos.members.clone(), r.candidates.clone(), r.pairs.clone()),
            None => Default::default(),
        };
        StructureSignature {
            relu,
            members,
            candidates,
            pairs,
        }
    }
}

fn dropout_mask(n: usize, d: usize, rate: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn((n, d), |_| if rng.random_bool(1.0 - rate) { keep } else { 0.0 })
}

/// Runs one bag through the model. With a label the grade and ranking losses are
/// evaluated as well.
pub fn forward(
    params: &ModelParams,
    cfg: &TrainConfig,
    features: &Array2<f64>,
    graph: &HybridGraph,
    label: Option<usize>,
    opts: ForwardOptions,
) -> Result<BagForward> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::InvalidBag("bag has no patches".into()));
    }
    if graph.n() != n {
        return Err(Error::Shape(format!("graph has {} nodes for {} patches", graph.n(), n)));
    }
    let c = params.num_classes();
    if let Some(y) = label {
        if y >= c {
            return Err(Error::InvalidBag(format!("label {y} outside {c} classes")));
        }
    }
    let mask = match opts.dropout_seed {
        Some(seed) if cfg.dropout > 0.0 => Some(dropout_mask(n, params.hidden_dim(), cfg.dropout, seed)),
        _ => None,
    };
    let proj = project(features, &params.proj, mask.as_ref())?;
    let mut layers = Vec::new();
    let mut h = proj.h0.clone();
    if cfg.graph_mode != GraphMode::None {
        for lp in &params.layers {
            let cache = layer_forward(&h, &graph.latent, &graph.spatial, lp, cfg.graph_mode, cfg.message_combine)?;
            h = cache.h_out.clone();
            layers.push(cache);
        }
    }
    let att = attention_weights(&h, &params.pool.a, &params.pool.u);
    let scores = class_scores(&h, &params.pool.prototypes, cfg.tau);
    let bag_scores = bag_likelihood(&att.w, &scores.s);
    let probs = patch_probs(&scores.s);

    let (grade, rank) = match label {
        None => (None, None),
        Some(y) => {
            let gl = grade_loss(&bag_scores, y, cfg.grade_loss_mode);
            let protos = grade_prototypes(&h, &probs, cfg.confidence_threshold, cfg.normalize_grade_prototypes);
            let proto_att = prototype_attention(&protos, &params.pool.a, &params.pool.u);
            let (inter, inter_dw) = inter_grade_loss(&proto_att.w, &protos.present);
            let w = att.w.as_slice().expect("contiguous");
            let p_class = probs.column(y).to_vec();
            let candidates = intra_candidates(w, &p_class, cfg.rank_k);
            let pairs = intra_pairs(&candidates, &p_class, cfg.bin_width, cfg.pair_cap, opts.pair_seed);
            let (intra, intra_dw) = intra_grade_loss(w, &pairs, cfg.intra_loss_mode);
            (
                Some(gl),
                Some(RankTerms {
                    protos,
                    proto_att,
                    inter,
                    inter_dw,
                    candidates,
                    pairs,
                    intra,
                    intra_dw,
                }),
            )
        }
    };
    Ok(BagForward {
        proj,
        layers,
        h,
        att,
        scores,
        bag_scores,
        probs,
        label,
        grade_loss: grade,
        rank,
    })
}

/// Multipliers applied to a bag's loss terms in the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub grade: f64,
    /// Shared by the inter- and intra-grade terms.
    pub rank: f64,
}

/// Gradient of `grade * L_grade + rank * (L_inter + L_intra)` for one labelled bag.
pub fn backward(params: &ModelParams, cfg: &TrainConfig, fwd: &BagForward, weights: LossWeights) -> Result<ModelParams> {
    let (Some((_, dp_grade)), Some(rank)) = (&fwd.grade_loss, &fwd.rank) else {
        return Err(Error::InvalidParameter("backward needs a labelled forward pass".into()));
    };
    let pool = &params.pool;
    let mut grad = params.zeros_like();

    let dp = dp_grade * weights.grade;
    // p = S^T w
    let mut dw = fwd.scores.s.dot(&dp);
    let mut ds = Array2::from_shape_fn(fwd.scores.s.dim(), |(n, k)| fwd.att.w[n] * dp[k]);
    let mut dh = Array2::zeros(fwd.h.dim());

    if weights.rank != 0.0 {
        for (g, v) in dw.iter_mut().zip(&rank.intra_dw) {
            *g += weights.rank * v;
        }
        let dwc: Vec<f64> = rank.inter_dw.iter().map(|v| v * weights.rank).collect();
        let (da, du, dproto) =
            prototype_attention_backward(&rank.proto_att, &rank.protos, &pool.a, &pool.u, &dwc);
        grad.pool.a += &da;
        grad.pool.u += &du;
        let (dh_p, dprobs) = grade_prototypes_backward(&rank.protos, &fwd.h, &fwd.probs, &dproto);
        dh += &dh_p;
        ds += &patch_probs_backward(&fwd.probs, &dprobs);
    }

    let (da, du, dh_att) = attention_backward(&fwd.att, &fwd.h, &pool.a, &pool.u, &dw);
    grad.pool.a += &da;
    grad.pool.u += &du;
    dh += &dh_att;
    let (dh_cls, dz) = class_scores_backward(&fwd.scores, cfg.tau, &ds);
    dh += &dh_cls;
    if cfg.prototype_mode == PrototypeMode::Learned {
        grad.pool.prototypes = dz;
    }

    for (l, cache) in fwd.layers.iter().enumerate().rev() {
        dh = layer_backward(cache, &params.layers[l], cfg.message_combine, &dh, &mut grad.layers[l]);
    }
    grad.proj = project_backward(&fwd.proj, &params.proj, &dh);
    Ok(grad)
}

/// Diversity penalty summed over layers; zero unless both graphs are in use.
/// The flag reports a degenerate (all-zero) attention matrix.
pub fn diversity(params: &ModelParams, cfg: &TrainConfig) -> Result<(f64, bool)> {
    if cfg.graph_mode != GraphMode::Dual {
        return Ok((0.0, false));
    }
    let mut total = 0.0;
    let mut degenerate = false;
    for l in &params.layers {
        let v = diversity_loss(&l.w_att_lat, &l.w_att_spa, cfg.diversity_mode)?;
        total += v.loss;
        degenerate |= v.degenerate;
    }
    Ok((total, degenerate))
}

/// Adds `weight * d(diversity)/dparams` into `grad`.
pub fn add_diversity_grad(params: &ModelParams, cfg: &TrainConfig, weight: f64, grad: &mut ModelParams) {
    if cfg.graph_mode != GraphMode::Dual || weight == 0.0 {
        return;
    }
    for (l, g) in params.layers.iter().zip(grad.layers.iter_mut()) {
        let (dl, ds) = diversity_loss_grad(&l.w_att_lat, &l.w_att_spa, cfg.diversity_mode);
        g.w_att_lat.scaled_add(weight, &dl);
        g.w_att_spa.scaled_add(weight, &ds);
    }
}

/// Evaluation-mode prediction for one bag.
#[derive(Clone, Debug)]
pub struct BagPrediction {
    pub grade: usize,
    pub bag_scores: Vec<f64>,
    pub attention: Vec<f64>,
    /// Per-patch class probabilities, one row per patch.
    pub patch_probs: Array2<f64>,
}

pub fn predict(params: &ModelParams, cfg: &TrainConfig, features: &Array2<f64>, graph: &HybridGraph) -> Result<BagPrediction> {
    let fwd = forward(params, cfg, features, graph, None, ForwardOptions::default())?;
    Ok(BagPrediction {
        grade: fwd.predicted_grade(),
        bag_scores: fwd.bag_scores.to_vec(),
        attention: fwd.att.w.to_vec(),
        patch_probs: fwd.probs,
    })
}
