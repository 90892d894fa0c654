//! Flat training configuration. Defaults are the skin-SCC dual-graph setting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attgnn::{DiversityMode, GraphMode, MessageCombine};
use crate::error::{Error, Result};
use crate::graphbuild::{DiffusionConfig, DiffusionMode, LatentWeight};
use crate::milhead::{GradeLossMode, PrototypeMode};
use crate::rankloss::IntraLossMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    // Objective weights.
    pub lambda1: f64,
    pub lambda2: f64,
    /// Epochs over which `lambda1` ramps linearly from 0.
    pub warmup_epochs: usize,

    // Optimizer (decoupled weight decay Adam).
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Class-balanced sampling coefficient.
    pub beta_cb: f64,

    // Graph construction.
    pub alpha: f64,
    pub truncation_tol: f64,
    pub delta: f64,
    pub top_m: usize,
    pub k_latent: usize,
    pub k_spatial: usize,
    pub latent_weight: LatentWeight,
    pub diffusion_mode: DiffusionMode,

    // Architecture.
    pub d_h: usize,
    pub dropout: f64,
    pub layers: usize,
    pub graph_mode: GraphMode,
    pub message_combine: MessageCombine,
    pub tau: f64,

    // Loss variants and ranking knobs.
    pub diversity_mode: DiversityMode,
    pub grade_loss_mode: GradeLossMode,
    pub intra_loss_mode: IntraLossMode,
    pub prototype_mode: PrototypeMode,
    pub prototype_momentum: f64,
    pub normalize_grade_prototypes: bool,
    /// Probability a patch needs to join a grade prototype.
    pub confidence_threshold: f64,
    #[serde(rename = "K")]
    pub rank_k: usize,
    pub bin_width: f64,
    pub pair_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::skin()
    }
}

impl TrainConfig {
    /// Skin SCC, dual graph.
    pub fn skin() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.1,
            warmup_epochs: 10,
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 60,
            early_stop_patience: 9,
            seed: 0,
            beta_cb: 0.999,
            alpha: 0.25,
            truncation_tol: 1e-10,
            delta: 0.02,
            top_m: 5,
            k_latent: 8,
            k_spatial: 8,
            latent_weight: LatentWeight::Similarity,
            diffusion_mode: DiffusionMode::Auto,
            d_h: 64,
            dropout: 0.5,
            layers: 1,
            graph_mode: GraphMode::Dual,
            message_combine: MessageCombine::Sum,
            tau: 0.1,
            diversity_mode: DiversityMode::Decorrelate,
            grade_loss_mode: GradeLossMode::SoftmaxCe,
            intra_loss_mode: IntraLossMode::RankNet,
            prototype_mode: PrototypeMode::Learned,
            prototype_momentum: 0.9,
            normalize_grade_prototypes: false,
            confidence_threshold: 0.5,
            rank_k: 16,
            bin_width: 0.1,
            pair_cap: 512,
        }
    }

    /// Head and neck SCC, dual graph.
    pub fn head_neck() -> Self {
        Self {
            lambda1: 0.1,
            max_epochs: 100,
            ..Self::skin()
        }
    }

    /// Lung SCC (three classes), dual graph.
    pub fn lung() -> Self {
        Self {
            lambda1: 0.3,
            tau: 0.3,
            max_epochs: 100,
            ..Self::skin()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "skin" => Some(Self::skin()),
            "head_neck" => Some(Self::head_neck()),
            "lung" => Some(Self::lung()),
            _ => None,
        }
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            alpha: self.alpha,
            truncation_tol: self.truncation_tol,
            top_m: self.top_m,
            delta: self.delta,
            k_latent: self.k_latent,
            k_spatial: self.k_spatial,
            latent_weight: self.latent_weight,
            mode: self.diffusion_mode,
        }
    }

    /// Ranking weight for a 0-based epoch under the linear warm-up.
    pub fn lambda1_at(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            self.lambda1
        } else {
            self.lambda1 * (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        let nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 || self.d_h == 0 || self.rank_k == 0 || self.pair_cap == 0 {
            return bad("batch_size, d_h, K and pair_cap must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.bin_width > 0.0) {
            return bad("bin_width must be > 0");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta_cb) {
            return bad("beta_cb must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.prototype_momentum) {
            return bad("prototype_momentum must be in [0, 1]");
        }
        if self.graph_mode != GraphMode::None && self.layers == 0 {
            return bad("graph modes other than `none` need at least one layer");
        }
        self.diffusion().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
