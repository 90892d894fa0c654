//! Checkpoint directories: `manifest.json` plus a little-endian f32 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bagio::{f32_to_le_bytes, le_bytes_to_f32};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParams, TensorSpec};

pub const FORMAT: &str = "racr-checkpoint-1";
const PAYLOAD: &str = "params.f32";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    feature_dim: usize,
    hidden_dim: usize,
    layers: usize,
    num_classes: usize,
    config: TrainConfig,
    meta: CheckpointMeta,
    payload: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub meta: CheckpointMeta,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), msg.into()))
}

/// Writes the checkpoint into `dir`, creating it if needed. Parameters are stored as f32.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &ckpt.params;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        feature_dim: p.feature_dim(),
        hidden_dim: p.hidden_dim(),
        layers: p.layers.len(),
        num_classes: p.num_classes(),
        config: ckpt.config.clone(),
        meta: ckpt.meta.clone(),
        payload: PAYLOAD.to_string(),
        tensors: p
            .layout()
            .into_iter()
            .map(|TensorSpec { name, shape }| TensorEntry { name, shape })
            .collect(),
    };
    let values: Vec<f32> = p.flatten().into_iter().map(|v| v as f32).collect();
    let mpath = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PAYLOAD);
    std::fs::write(&ppath, f32_to_le_bytes(&values)).map_err(|e| Error::io(&ppath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(&mpath, e.to_string()))?;
    if m.format != FORMAT {
        return Err(corrupt(&mpath, format!("unknown format {:?}", m.format)));
    }
    let mut params = ModelParams::zeros(m.feature_dim, m.hidden_dim, m.layers, m.num_classes);
    let expected: Vec<TensorEntry> = params
        .layout()
        .into_iter()
        .map(|TensorSpec { name, shape }| TensorEntry { name, shape })
        .collect();
    if expected != m.tensors {
        return Err(corrupt(&mpath, "tensor table does not match the declared dimensions"));
    }
    let ppath = dir.join(&m.payload);
    let bytes = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let n = params.num_params();
    if bytes.len() != 4 * n {
        return Err(corrupt(&ppath, format!("expected {} bytes, found {}", 4 * n, bytes.len())));
    }
    let values = le_bytes_to_f32(&bytes);
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(corrupt(&ppath, format!("non-finite parameter at {i}")));
    }
    params.assign_flat(&values.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
    m.config.validate()?;
    Ok(Checkpoint {
        params,
        config: m.config,
        meta: m.meta,
    })
}
