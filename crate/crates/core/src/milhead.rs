//! Attention pooling over patch class scores from a cosine classifier.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::util::{log_sum_exp, softmax, softmax_backward};

#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams {
    pub a: Array1<f64>,
    pub u: Array2<f64>,
    /// `C x d` class prototypes, one unit-norm row per grade.
    pub prototypes: Array2<f64>,
}

impl PoolParams {
    pub fn zeros(d: usize, num_classes: usize) -> Self {
        Self {
            a: Array1::zeros(d),
            u: Array2::zeros((d, d)),
            prototypes: Array2::zeros((num_classes, d)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeLossMode {
    /// Cross-entropy of softmax over the bag scores treated as logits.
    #[default]
    SoftmaxCe,
    /// `-ln(p_{b,Y} + 1e-8)` on the raw scores.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    /// Prototypes are trained by gradient descent and renormalized after every step.
    #[default]
    Learned,
    /// Prototypes track the mean normalized embedding of confidently assigned patches.
    Ema,
}

pub const NORM_EPS: f64 = 1e-12;
pub const LITERAL_LOG_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Gated attention a^T tanh(U h)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttentionCache {
    /// `tanh(H U^T)`, one row per input row.
    pub t: Array2<f64>,
    pub logits: Array1<f64>,
    pub w: Array1<f64>,
}

pub fn attention_logits(h: &Array2<f64>, a: &Array1<f64>, u: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let t = h.dot(&u.t()).mapv(f64::tanh);
    let logits = t.dot(a);
    (t, logits)
}

/// Patch attention: softmax over patches of `a^T tanh(U h_n)`.
pub fn attention_weights(h: &Array2<f64>, a: &Array1<f64>, u: &Array2<f64>) -> AttentionCache {
    let (t, logits) = attention_logits(h, a, u);
    let w = Array1::from(softmax(logits.as_slice().expect("contiguous")));
    AttentionCache { t, logits, w }
}

/// Backward of `logits = tanh(H U^T) a` given `dL/dlogits`. Returns `(da, dU, dH)`.
pub fn attention_logits_backward(
    t: &Array2<f64>,
    h: &Array2<f64>,
    a: &Array1<f64>,
    u: &Array2<f64>,
    dlogits: &Array1<f64>,
) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
    let da = t.t().dot(dlogits);
    let mut dpre = Array2::zeros(t.dim());
    for ((n, c), v) in dpre.indexed_iter_mut() {
        let tv: f64 = t[[n, c]];
        *v = dlogits[n] * a[c] * (1.0 - tv * tv);
    }
    let du = dpre.t().dot(h);
    let dh = dpre.dot(u);
    (da, du, dh)
}

/// Backward through the patch softmax and the logits.
pub fn attention_backward(
    cache: &AttentionCache,
    h: &Array2<f64>,
    a: &Array1<f64>,
    u: &Array2<f64>,
    dw: &Array1<f64>,
) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
    let dlogits = Array1::from(softmax_backward(
        cache.w.as_slice().expect("contiguous"),
        dw.as_slice().expect("contiguous"),
    ));
    attention_logits_backward(&cache.t, h, a, u, &dlogits)
}

// ---------------------------------------------------------------------------
// Cosine classifier
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ScoreCache {
    pub hhat: Array2<f64>,
    pub hnorm: Array1<f64>,
    pub zhat: Array2<f64>,
    pub znorm: Array1<f64>,
    /// Cosine / tau before the ReLU.
    pub raw: Array2<f64>,
    pub s: Array2<f64>,
}

fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| (r.dot(&r) + NORM_EPS).sqrt());
    let mut out = x.clone();
    for (mut row, &nrm) in out.rows_mut().into_iter().zip(norms.iter()) {
        row /= nrm;
    }
    (out, norms)
}

/// `s_nc = ReLU(<h_n/|h_n|, z_c/|z_c|> / tau)`.
pub fn class_scores(h: &Array2<f64>, prototypes: &Array2<f64>, tau: f64) -> ScoreCache {
    let (hhat, hnorm) = normalize_rows(h);
    let (zhat, znorm) = normalize_rows(prototypes);
    let raw = hhat.dot(&zhat.t()) / tau;
    let s = raw.mapv(|v| v.max(0.0));
    ScoreCache {
        hhat,
        hnorm,
        zhat,
        znorm,
        raw,
        s,
    }
}

fn normalize_rows_backward(xhat: &Array2<f64>, norms: &Array1<f64>, dxhat: &Array2<f64>) -> Array2<f64> {
    // d(x/r) = dxhat / r - xhat (xhat . dxhat) / r  with r = sqrt(|x|^2 + eps)
    let mut dx = Array2::zeros(xhat.dim());
    for i in 0..xhat.nrows() {
        let dot = xhat.row(i).dot(&dxhat.row(i));
        let r = norms[i];
        let mut row = dx.row_mut(i);
        row.assign(&dxhat.row(i));
        row.scaled_add(-dot, &xhat.row(i));
        row /= r;
    }
    dx
}

/// Returns `(dH, dZ)`.
pub fn class_scores_backward(cache: &ScoreCache, tau: f64, ds: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut draw = ds.clone();
    draw.zip_mut_with(&cache.raw, |g, &r| {
        if r <= 0.0 {
            *g = 0.0
        }
    });
    draw /= tau;
    let dhhat = draw.dot(&cache.zhat);
    let dzhat = draw.t().dot(&cache.hhat);
    (
        normalize_rows_backward(&cache.hhat, &cache.hnorm, &dhhat),
        normalize_rows_backward(&cache.zhat, &cache.znorm, &dzhat),
    )
}

/// `p_c = sum_n w_n s_nc`.
pub fn bag_likelihood(w: &Array1<f64>, s: &Array2<f64>) -> Array1<f64> {
    s.t().dot(w)
}

/// Bag grade loss and its gradient w.r.t. the bag scores.
pub fn grade_loss(p: &Array1<f64>, label: usize, mode: GradeLossMode) -> (f64, Array1<f64>) {
    match mode {
        GradeLossMode::SoftmaxCe => {
            let ps = p.as_slice().expect("contiguous");
            let loss = log_sum_exp(ps) - p[label];
            let mut dp = Array1::from(softmax(ps));
            dp[label] -= 1.0;
            (loss, dp)
        }
        GradeLossMode::PaperLiteral => {
            let v = p[label] + LITERAL_LOG_EPS;
            let mut dp = Array1::zeros(p.len());
            dp[label] = -1.0 / v;
            (-v.ln(), dp)
        }
    }
}

/// Moves each prototype toward the mean normalized embedding of patches whose
/// predicted class is `c` with probability above `threshold`, then renormalizes.
pub fn ema_prototype_update(
    prototypes: &mut Array2<f64>,
    hhat: &Array2<f64>,
    probs: &Array2<f64>,
    momentum: f64,
    threshold: f64,
) {
    let c = prototypes.nrows();
    let mut sums = Array2::<f64>::zeros(prototypes.dim());
    let mut counts = vec![0usize; c];
    for n in 0..probs.nrows() {
        let row = probs.row(n);
        let best = crate::util::argmax(row.as_slice().expect("contiguous"));
        if row[best] > threshold {
            sums.row_mut(best).scaled_add(1.0, &hhat.row(n));
            counts[best] += 1;
        }
    }
    for k in 0..c {
        if counts[k] == 0 {
            continue;
        }
        let mean = sums.row(k).mapv(|v| v / counts[k] as f64);
        let mut z = prototypes.row_mut(k);
        z *= momentum;
        z.scaled_add(1.0 - momentum, &mean);
        let nrm = z.dot(&z).sqrt();
        if nrm > 0.0 {
            z /= nrm;
        }
    }
}
