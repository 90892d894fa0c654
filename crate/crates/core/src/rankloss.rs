//! Ordinal ranking constraints on attention.
//!
//! Inter-grade: per-bag grade prototypes are scored by the pooling attention net; adjacent
//! grades must rank the more severe prototype higher. Intra-grade: among high-attention and
//! high-confidence patches, a patch in a higher confidence bin must receive more attention.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::milhead::{attention_logits, attention_logits_backward};
use crate::util::{log_sigmoid, sigmoid, softmax, softmax_backward, softplus, top_k_indices};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraLossMode {
    /// Mean of `-ln sigma(w_j - w_i)` over pairs with `bin_i < bin_j`.
    #[default]
    RankNet,
    /// Sum of `ln sigma(w_i - w_j)` over the same pairs, as printed.
    PaperLiteral,
}

/// Row-wise softmax of the class scores.
pub fn patch_probs(s: &Array2<f64>) -> Array2<f64> {
    let mut p = s.clone();
    for mut row in p.rows_mut() {
        let sm = softmax(row.as_slice().expect("contiguous"));
        row.assign(&Array1::from(sm));
    }
    p
}

/// Backward of [`patch_probs`].
pub fn patch_probs_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.dim());
    for n in 0..p.nrows() {
        let g = softmax_backward(
            p.row(n).as_slice().expect("contiguous"),
            dp.row(n).to_vec().as_slice(),
        );
        ds.row_mut(n).assign(&Array1::from(g));
    }
    ds
}

#[derive(Clone, Debug)]
pub struct GradePrototypes {
    /// `C x d`; rows of absent classes are zero.
    pub w: Array2<f64>,
    pub present: Vec<bool>,
    /// Contributing patches per class.
    pub members: Vec<Vec<usize>>,
    /// `sum_n p_nc` over members; used only when normalized.
    pub mass: Vec<f64>,
    pub normalized: bool,
}

/// `W^c = sum_{n: p_nc > threshold} p_nc h_n`, optionally divided by the contributing mass.
pub fn grade_prototypes(h: &Array2<f64>, p: &Array2<f64>, threshold: f64, normalize: bool) -> GradePrototypes {
    let c = p.ncols();
    let mut w = Array2::zeros((c, h.ncols()));
    let mut members = vec![Vec::new(); c];
    let mut mass = vec![0.0; c];
    for n in 0..p.nrows() {
        for k in 0..c {
            let pk = p[[n, k]];
            if pk > threshold {
                w.row_mut(k).scaled_add(pk, &h.row(n));
                members[k].push(n);
                mass[k] += pk;
            }
        }
    }
    if normalize {
        for k in 0..c {
            if mass[k] > 0.0 {
                let mut row = w.row_mut(k);
                row /= mass[k];
            }
        }
    }
    GradePrototypes {
        present: members.iter().map(|m| !m.is_empty()).collect(),
        w,
        members,
        mass,
        normalized: normalize,
    }
}

/// Returns `(dH, dP)`.
pub fn grade_prototypes_backward(
    protos: &GradePrototypes,
    h: &Array2<f64>,
    p: &Array2<f64>,
    dw: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut dh = Array2::zeros(h.dim());
    let mut dp = Array2::zeros(p.dim());
    for (k, members) in protos.members.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let g = dw.row(k);
        let (scale, shift) = if protos.normalized {
            (1.0 / protos.mass[k], g.dot(&protos.w.row(k)))
        } else {
            (1.0, 0.0)
        };
        for &n in members {
            dh.row_mut(n).scaled_add(p[[n, k]] * scale, &g);
            dp[[n, k]] = (g.dot(&h.row(n)) - shift) * scale;
        }
    }
    (dh, dp)
}

#[derive(Clone, Debug)]
pub struct PrototypeAttention {
    pub t: Array2<f64>,
    /// Softmax over present classes; zero for absent classes.
    pub w: Vec<f64>,
    pub present_idx: Vec<usize>,
}

/// Scores each present prototype with the patch-attention net and normalizes over them.
pub fn prototype_attention(protos: &GradePrototypes, a: &Array1<f64>, u: &Array2<f64>) -> PrototypeAttention {
    let (t, logits) = attention_logits(&protos.w, a, u);
    let present_idx: Vec<usize> = (0..protos.present.len()).filter(|&k| protos.present[k]).collect();
    let sel: Vec<f64> = present_idx.iter().map(|&k| logits[k]).collect();
    let mut w = vec![0.0; protos.present.len()];
    for (&k, v) in present_idx.iter().zip(softmax(&sel)) {
        w[k] = v;
    }
    PrototypeAttention { t, w, present_idx }
}

/// Returns `(da, dU, dW_prototypes)`.
pub fn prototype_attention_backward(
    pa: &PrototypeAttention,
    protos: &GradePrototypes,
    a: &Array1<f64>,
    u: &Array2<f64>,
    dw: &[f64],
) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
    let y: Vec<f64> = pa.present_idx.iter().map(|&k| pa.w[k]).collect();
    let dy: Vec<f64> = pa.present_idx.iter().map(|&k| dw[k]).collect();
    let mut dlogits = Array1::zeros(pa.w.len());
    for (&k, g) in pa.present_idx.iter().zip(softmax_backward(&y, &dy)) {
        dlogits[k] = g;
    }
    attention_logits_backward(&pa.t, &protos.w, a, u, &dlogits)
}

/// `sum_c ln(1 + exp(w_c - w_{c+1}))` over adjacent grades with both prototypes present.
pub fn inter_grade_loss(w: &[f64], present: &[bool]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut dw = vec![0.0; w.len()];
    for c in 0..w.len().saturating_sub(1) {
        if present[c] && present[c + 1] {
            let diff = w[c] - w[c + 1];
            loss += softplus(diff);
            let g = sigmoid(diff);
            dw[c] += g;
            dw[c + 1] -= g;
        }
    }
    (loss, dw)
}

/// `TopK(w) ∪ TopK(p[:, class])`, sorted ascending.
pub fn intra_candidates(w: &[f64], p_class: &[f64], k: usize) -> Vec<usize> {
    let mut s = top_k_indices(w, k);
    s.extend(top_k_indices(p_class, k));
    s.sort_unstable();
    s.dedup();
    s
}

/// Confidence bin index, clamped so that `p = 1` shares the top bin.
pub fn confidence_bin(p: f64, bin_width: f64) -> i64 {
    let bins = (1.0 / bin_width).ceil() as i64;
    ((p / bin_width).floor() as i64).clamp(0, bins.max(1) - 1)
}

/// Ordered pairs `(i, j)` of candidates with `bin(p_i) < bin(p_j)`, subsampled to `cap`.
pub fn intra_pairs(candidates: &[usize], p_class: &[f64], bin_width: f64, cap: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for &i in candidates {
        for &j in candidates {
            if confidence_bin(p_class[i], bin_width) < confidence_bin(p_class[j], bin_width) {
                pairs.push((i, j));
            }
        }
    }
    if pairs.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = sample(&mut rng, pairs.len(), cap).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|k| pairs[k]).collect();
    }
    pairs
}

/// Intra-grade loss over `pairs` and its gradient w.r.t. the `n` patch attentions.
pub fn intra_grade_loss(w: &[f64], pairs: &[(usize, usize)], mode: IntraLossMode) -> (f64, Vec<f64>) {
    let mut dw = vec![0.0; w.len()];
    if pairs.is_empty() {
        return (0.0, dw);
    }
    match mode {
        IntraLossMode::RankNet => {
            let scale = 1.0 / pairs.len() as f64;
            let mut loss = 0.0;
            for &(i, j) in pairs {
                let m = w[j] - w[i];
                loss -= log_sigmoid(m);
                let g = (1.0 - sigmoid(m)) * scale;
                dw[i] += g;
                dw[j] -= g;
            }
            (loss * scale, dw)
        }
        IntraLossMode::PaperLiteral => {
            let mut loss = 0.0;
            for &(i, j) in pairs {
                let m = w[i] - w[j];
                loss += log_sigmoid(m);
                let g = 1.0 - sigmoid(m);
                dw[i] += g;
                dw[j] -= g;
            }
            (loss, dw)
        }
    }
}
