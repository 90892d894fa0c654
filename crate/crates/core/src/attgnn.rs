//! Feature projection and the attention-based graph network producing contextual patch
//! features `H1` from projected features `H0`.
//!
//! Row-vector convention throughout: `K = H W_k`, `Q_t = H W_q^t`, `V = H W_v`, and the edge
//! logit for centre `i` and neighbour `j` is `(K W_att^t)_i . Q_t,j / sqrt(d)`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphbuild::SparseGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ProjectionParams {
    pub fn zeros(feature_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w1: Array2::zeros((feature_dim, hidden_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((hidden_dim, hidden_dim)),
            b2: Array1::zeros(hidden_dim),
        }
    }
}

/// One message-passing layer. `W_k`, `W_v` are shared by both graphs; query and
/// attention matrices are per graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayerParams {
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_q_lat: Array2<f64>,
    pub w_q_spa: Array2<f64>,
    pub w_att_lat: Array2<f64>,
    pub w_att_spa: Array2<f64>,
    pub ln_scale: Array1<f64>,
    pub ln_shift: Array1<f64>,
}

impl GnnLayerParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_q_lat: Array2::zeros((d, d)),
            w_q_spa: Array2::zeros((d, d)),
            w_att_lat: Array2::zeros((d, d)),
            w_att_spa: Array2::zeros((d, d)),
            ln_scale: Array1::zeros(d),
            ln_shift: Array1::zeros(d),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    #[default]
    Dual,
    Latent,
    Spatial,
    /// Plain attention MIL: `H1 = H0`.
    None,
}

impl GraphMode {
    pub fn uses_latent(self) -> bool {
        matches!(self, GraphMode::Dual | GraphMode::Latent)
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, GraphMode::Dual | GraphMode::Spatial)
    }
}

/// How the two graphs' messages are combined before normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageCombine {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    /// Squared cosine between the flattened attention matrices.
    #[default]
    Decorrelate,
    /// `1 - cos`.
    PaperLiteral,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Projection MLP
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ProjectionCache {
    pub x: Array2<f64>,
    pub z1: Array2<f64>,
    /// Post-activation, post-dropout hidden layer.
    pub hidden: Array2<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)); `None` in eval mode.
    pub mask: Option<Array2<f64>>,
    pub h0: Array2<f64>,
}

/// `H0 = dropout(ReLU(X W1 + b1)) W2 + b2`.
pub fn project(x: &Array2<f64>, p: &ProjectionParams, mask: Option<&Array2<f64>>) -> Result<ProjectionCache> {
    if x.ncols() != p.w1.nrows() {
        return Err(Error::Shape(format!(
            "features have d_f={} but projection expects {}",
            x.ncols(),
            p.w1.nrows()
        )));
    }
    let z1 = x.dot(&p.w1) + &p.b1;
    let mut hidden = z1.mapv(|v| v.max(0.0));
    if let Some(m) = mask {
        hidden *= m;
    }
    let h0 = hidden.dot(&p.w2) + &p.b2;
    Ok(ProjectionCache {
        x: x.clone(),
        z1,
        hidden,
        mask: mask.cloned(),
        h0,
    })
}

pub fn project_backward(cache: &ProjectionCache, p: &ProjectionParams, dh0: &Array2<f64>) -> ProjectionParams {
    let w2 = cache.hidden.t().dot(dh0);
    let b2 = dh0.sum_axis(Axis(0));
    let mut dz = dh0.dot(&p.w2.t());
    if let Some(m) = &cache.mask {
        dz *= m;
    }
    dz.zip_mut_with(&cache.z1, |g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    ProjectionParams {
        w1: cache.x.t().dot(&dz),
        b1: dz.sum_axis(Axis(0)),
        w2,
        b2,
    }
}

// ---------------------------------------------------------------------------
// Per-graph attention
// ---------------------------------------------------------------------------

/// Per node `i`: `(j, logit_ij)` for every neighbour `j` of `i`.
pub type EdgeValues = Vec<Vec<(usize, f64)>>;

fn edge_logits_from(g: &Array2<f64>, q: &Array2<f64>, graph: &SparseGraph) -> EdgeValues {
    let scale = 1.0 / (g.ncols() as f64).sqrt();
    (0..graph.n())
        .map(|i| {
            graph
                .neighbors(i)
                .iter()
                .map(|&(j, _)| (j, g.row(i).dot(&q.row(j)) * scale))
                .collect()
        })
        .collect()
}

/// Attention logits `(h_i W_k) W_att (h_j W_q)^T / sqrt(d)` for every directed edge.
pub fn edge_logits(
    h: &Array2<f64>,
    graph: &SparseGraph,
    w_k: &Array2<f64>,
    w_q: &Array2<f64>,
    w_att: &Array2<f64>,
) -> EdgeValues {
    let g = h.dot(w_k).dot(w_att);
    let q = h.dot(w_q);
    edge_logits_from(&g, &q, graph)
}

/// Softmax of the logits over each node's neighbourhood. Isolated nodes stay empty.
pub fn neighbor_softmax(logits: &EdgeValues) -> EdgeValues {
    logits
        .iter()
        .map(|row| {
            if row.is_empty() {
                return Vec::new();
            }
            let max = row.iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&(_, a)| (a - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            row.iter().zip(exps).map(|(&(j, _), e)| (j, e / sum)).collect()
        })
        .collect()
}

/// `m_i = sum_j beta_ij v_j`; zero rows for isolated nodes.
pub fn aggregate(beta: &EdgeValues, v: &Array2<f64>) -> Array2<f64> {
    let mut m = Array2::zeros(v.dim());
    for (i, row) in beta.iter().enumerate() {
        let mut mi = m.row_mut(i);
        for &(j, b) in row {
            mi.scaled_add(b, &v.row(j));
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct GraphAttentionCache {
    pub q: Array2<f64>,
    pub g: Array2<f64>,
    pub beta: EdgeValues,
    pub m: Array2<f64>,
}

/// Messages over one graph given precomputed keys and values.
fn graph_attention(
    h: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    graph: &SparseGraph,
    w_q: &Array2<f64>,
    w_att: &Array2<f64>,
) -> GraphAttentionCache {
    let q = h.dot(w_q);
    let g = k.dot(w_att);
    let beta = neighbor_softmax(&edge_logits_from(&g, &q, graph));
    let m = aggregate(&beta, v);
    GraphAttentionCache { q, g, beta, m }
}

/// Messages `M^t` of one graph (the GConv operator) for a standalone layer.
pub fn gconv(h: &Array2<f64>, graph: &SparseGraph, w_k: &Array2<f64>, w_v: &Array2<f64>, w_q: &Array2<f64>, w_att: &Array2<f64>) -> Array2<f64> {
    let k = h.dot(w_k);
    let v = h.dot(w_v);
    graph_attention(h, &k, &v, graph, w_q, w_att).m
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FuseCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    /// Pre-activation output of the layer norm.
    pub y: Array2<f64>,
}

/// `H1 = H0 + ReLU(LayerNorm(combined))`.
pub fn fuse(h0: &Array2<f64>, combined: &Array2<f64>, scale: &Array1<f64>, shift: &Array1<f64>) -> (Array2<f64>, FuseCache) {
    let n = combined.nrows();
    let d = combined.ncols() as f64;
    let mut xhat = combined.clone();
    let mut inv_std = Array1::zeros(n);
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std[i] = inv;
    }
    let y = &xhat * scale + shift;
    let h1 = h0 + &y.mapv(|v| v.max(0.0));
    (h1, FuseCache { xhat, inv_std, y })
}

/// Gradients of [`fuse`] w.r.t. `combined`, `scale` and `shift` (the residual path is the
/// caller's responsibility).
fn fuse_backward(cache: &FuseCache, scale: &Array1<f64>, dh1: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let mut dy = dh1.clone();
    dy.zip_mut_with(&cache.y, |g, &y| {
        if y <= 0.0 {
            *g = 0.0
        }
    });
    let dscale = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dshift = dy.sum_axis(Axis(0));
    let dxhat = &dy * scale;
    let d = dxhat.ncols() as f64;
    let mut dc = Array2::zeros(dxhat.dim());
    for i in 0..dxhat.nrows() {
        let gx = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = gx.sum() / d;
        let mean_gx = gx.dot(&xh) / d;
        let inv = cache.inv_std[i];
        for c in 0..gx.len() {
            dc[[i, c]] = inv * (gx[c] - mean_g - xh[c] * mean_gx);
        }
    }
    (dc, dscale, dshift)
}

// ---------------------------------------------------------------------------
// Full layer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerCache {
    pub h_in: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub lat: Option<GraphAttentionCache>,
    pub spa: Option<GraphAttentionCache>,
    pub fuse: FuseCache,
    pub h_out: Array2<f64>,
}

pub fn layer_forward(
    h: &Array2<f64>,
    latent: &SparseGraph,
    spatial: &SparseGraph,
    p: &GnnLayerParams,
    mode: GraphMode,
    combine: MessageCombine,
) -> Result<LayerCache> {
    if latent.n() != h.nrows() || spatial.n() != h.nrows() {
        return Err(Error::Shape(format!(
            "graph sizes ({}, {}) do not match {} patches",
            latent.n(),
            spatial.n(),
            h.nrows()
        )));
    }
    let k = h.dot(&p.w_k);
    let v = h.dot(&p.w_v);
    let lat = mode
        .uses_latent()
        .then(|| graph_attention(h, &k, &v, latent, &p.w_q_lat, &p.w_att_lat));
    let spa = mode
        .uses_spatial()
        .then(|| graph_attention(h, &k, &v, spatial, &p.w_q_spa, &p.w_att_spa));
    let mut combined = Array2::zeros(h.dim());
    for c in lat.iter().chain(spa.iter()) {
        combined += &c.m;
    }
    if combine == MessageCombine::Mean && lat.is_some() && spa.is_some() {
        combined *= 0.5;
    }
    let (h_out, fuse) = fuse(h, &combined, &p.ln_scale, &p.ln_shift);
    Ok(LayerCache {
        h_in: h.clone(),
        k,
        v,
        lat,
        spa,
        fuse,
        h_out,
    })
}

/// Accumulates parameter gradients into `grad` and returns `dL/dH_in`.
pub fn layer_backward(
    cache: &LayerCache,
    p: &GnnLayerParams,
    combine: MessageCombine,
    dh_out: &Array2<f64>,
    grad: &mut GnnLayerParams,
) -> Array2<f64> {
    let (mut dcomb, dscale, dshift) = fuse_backward(&cache.fuse, &p.ln_scale, dh_out);
    grad.ln_scale += &dscale;
    grad.ln_shift += &dshift;
    if combine == MessageCombine::Mean && cache.lat.is_some() && cache.spa.is_some() {
        dcomb *= 0.5;
    }

    let h = &cache.h_in;
    let mut dh = dh_out.clone();
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    let scale = 1.0 / (h.ncols() as f64).sqrt();

    let branches = [
        (cache.lat.as_ref(), &p.w_q_lat, &p.w_att_lat, true),
        (cache.spa.as_ref(), &p.w_q_spa, &p.w_att_spa, false),
    ];
    for (branch, w_q, w_att, is_lat) in branches {
        let Some(c) = branch else { continue };
        let mut dg = Array2::zeros(c.g.dim());
        let mut dq = Array2::zeros(c.q.dim());
        for (i, row) in c.beta.iter().enumerate() {
            if row.is_empty() {
                continue;
            }
            let dm = dcomb.row(i);
            let dbeta: Vec<f64> = row
                .iter()
                .map(|&(j, b)| {
                    dv.row_mut(j).scaled_add(b, &dm);
                    dm.dot(&cache.v.row(j))
                })
                .collect();
            let dot: f64 = row.iter().zip(&dbeta).map(|(&(_, b), db)| b * db).sum();
            for (&(j, b), db) in row.iter().zip(&dbeta) {
                let dalpha = b * (db - dot) * scale;
                dg.row_mut(i).scaled_add(dalpha, &c.q.row(j));
                dq.row_mut(j).scaled_add(dalpha, &c.g.row(i));
            }
        }
        let dw_att = cache.k.t().dot(&dg);
        dk += &dg.dot(&w_att.t());
        let dw_q = h.t().dot(&dq);
        dh += &dq.dot(&w_q.t());
        if is_lat {
            grad.w_att_lat += &dw_att;
            grad.w_q_lat += &dw_q;
        } else {
            grad.w_att_spa += &dw_att;
            grad.w_q_spa += &dw_q;
        }
    }
    grad.w_k += &h.t().dot(&dk);
    dh += &dk.dot(&p.w_k.t());
    grad.w_v += &h.t().dot(&dv);
    dh += &dv.dot(&p.w_v.t());
    dh
}

// ---------------------------------------------------------------------------
// Diversity regularizer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityValue {
    pub loss: f64,
    /// Either matrix is all zero; the cosine is undefined and the loss is reported as 0.
    pub degenerate: bool,
}

/// Cosine between the flattened matrices, with its gradients.
fn flat_cosine(a: &Array2<f64>, b: &Array2<f64>) -> Option<(f64, Array2<f64>, Array2<f64>)> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let da = b / (na * nb) - a * (cos / (na * na));
    let db = a / (na * nb) - b * (cos / (nb * nb));
    Some((cos, da, db))
}

pub fn diversity_loss(w_lat: &Array2<f64>, w_spa: &Array2<f64>, mode: DiversityMode) -> Result<DiversityValue> {
    if w_lat.dim() != w_spa.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", w_lat.dim(), w_spa.dim())));
    }
    Ok(match flat_cosine(w_lat, w_spa) {
        None => DiversityValue {
            loss: 0.0,
            degenerate: true,
        },
        Some((cos, _, _)) => DiversityValue {
            loss: match mode {
                DiversityMode::Decorrelate => cos * cos,
                DiversityMode::PaperLiteral => 1.0 - cos,
            },
            degenerate: false,
        },
    })
}

/// Gradient of [`diversity_loss`] w.r.t. both matrices (zero when degenerate).
pub fn diversity_loss_grad(w_lat: &Array2<f64>, w_spa: &Array2<f64>, mode: DiversityMode) -> (Array2<f64>, Array2<f64>) {
    match flat_cosine(w_lat, w_spa) {
        None => (Array2::zeros(w_lat.dim()), Array2::zeros(w_spa.dim())),
        Some((cos, da, db)) => {
            let outer = match mode {
                DiversityMode::Decorrelate => 2.0 * cos,
                DiversityMode::PaperLiteral => -1.0,
            };
            (da * outer, db * outer)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphbuild::{GraphKind, SparseGraph};
    use ndarray::array;

    #[test]
    fn zero_projection_is_zero() {
        let p = ProjectionParams::zeros(3, 2);
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        let c = project(&x, &p, None).unwrap();
        assert!(c.h0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_passes_positive_input() {
        let mut p = ProjectionParams::zeros(3, 3);
        p.w1 = Array2::eye(3);
        p.w2 = Array2::eye(3);
        let x = array![[1.0, 2.0, 3.0], [0.25, 4.0, 0.5]];
        assert_eq!(project(&x, &p, None).unwrap().h0, x);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let p = ProjectionParams::zeros(4, 2);
        assert!(matches!(project(&Array2::zeros((2, 3)), &p, None), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_h_gives_zero_logits_and_messages() {
        let g = SparseGraph::from_edges(3, GraphKind::Spatial, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let h = Array2::zeros((3, 2));
        let eye = Array2::eye(2);
        let l = edge_logits(&h, &g, &eye, &eye, &eye);
        assert!(l.iter().flatten().all(|&(_, a)| a == 0.0));
        assert!(gconv(&h, &g, &eye, &eye, &eye, &eye).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orthogonal_rows_give_zero_logit() {
        let g = SparseGraph::from_edges(2, GraphKind::Latent, [(0, 1, 0.3)]).unwrap();
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let eye = Array2::eye(2);
        let l = edge_logits(&h, &g, &eye, &eye, &eye);
        assert_eq!(l[0], vec![(1, 0.0)]);
    }

    #[test]
    fn softmax_cases() {
        let uniform = vec![vec![(1, 0.3), (2, 0.3), (3, 0.3), (4, 0.3)]];
        for &(_, b) in &neighbor_softmax(&uniform)[0] {
            assert!((b - 0.25).abs() < 1e-15);
        }
        assert_eq!(neighbor_softmax(&vec![vec![(7, -3.0)]])[0], vec![(7, 1.0)]);
        let b = neighbor_softmax(&vec![vec![(0, 0.0), (1, 3f64.ln())]]);
        assert!((b[0][0].1 - 0.25).abs() < 1e-15 && (b[0][1].1 - 0.75).abs() < 1e-15);
        assert!(neighbor_softmax(&vec![vec![]])[0].is_empty());
    }

    #[test]
    fn single_neighbour_message_is_its_value() {
        let g = SparseGraph::from_edges(2, GraphKind::Latent, [(0, 1, 0.5)]).unwrap();
        let h = array![[1.0, 2.0], [3.0, -4.0]];
        let eye = Array2::eye(2);
        let m = gconv(&h, &g, &eye, &eye, &eye, &eye);
        assert_eq!(m.row(0), h.row(1));
        assert_eq!(m.row(1), h.row(0));
    }

    #[test]
    fn zero_messages_leave_h0_unchanged() {
        let h0 = array![[1.0, -2.0, 0.5], [0.0, 0.0, 3.0]];
        let (h1, _) = fuse(&h0, &Array2::zeros((2, 3)), &Array1::ones(3), &Array1::zeros(3));
        assert_eq!(h1, h0);
    }

    #[test]
    fn diversity_cases() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let d = diversity_loss(&a, &a, DiversityMode::Decorrelate).unwrap();
        assert!((d.loss - 1.0).abs() < 1e-15);
        assert!(diversity_loss(&a, &a, DiversityMode::PaperLiteral).unwrap().loss.abs() < 1e-15);
        let x = array![[1.0, 0.0], [0.0, 0.0]];
        let y = array![[0.0, 1.0], [0.0, 0.0]];
        assert_eq!(diversity_loss(&x, &y, DiversityMode::Decorrelate).unwrap().loss, 0.0);
        assert_eq!(diversity_loss(&x, &y, DiversityMode::PaperLiteral).unwrap().loss, 1.0);
        let z = diversity_loss(&Array2::zeros((2, 2)), &a, DiversityMode::Decorrelate).unwrap();
        assert!(z.degenerate && z.loss == 0.0);
    }
}
