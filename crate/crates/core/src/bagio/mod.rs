//! Bag data model and on-disk format.
//!
//! A bag lives in its own directory:
//!
//! ```text
//! <bag_id>/manifest.json   UTF-8 header (id, grade, C, N, d_f, coords, annotations)
//! <bag_id>/features.f32    N x d_f little-endian f32, row-major
//! ```

mod sampling;
mod split;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use sampling::{class_balanced_weights, ClassBalancedSampler};
pub use split::{stratified_kfold, Fold, SplitSpec};
pub use synth::{generate_synthetic_dataset, label_from_planted, SynthSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.f32";

/// Ordinal grade code. 0 is always "normal"; larger is more severe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradeLabel(pub u8);

impl GradeLabel {
    pub const NORMAL: GradeLabel = GradeLabel(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub region_id: String,
    pub patch_indices: Vec<usize>,
    pub region_grade: GradeLabel,
}

/// One slide: N patches with grid coordinates and feature rows, plus a bag-level grade.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub grade: GradeLabel,
    pub num_classes: usize,
    /// Tile-grid indices `(s, t)`, one per patch.
    pub coords: Vec<(u32, u32)>,
    pub feature_dim: usize,
    /// Row-major `N x feature_dim`.
    pub features: Vec<f32>,
    /// Evaluation-only ground truth. Never read by training.
    pub annotations: Vec<RegionAnnotation>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_row(&self, n: usize) -> &[f32] {
        &self.features[n * self.feature_dim..(n + 1) * self.feature_dim]
    }

    pub fn feature_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.feature_dim), |(n, k)| {
            self.features[n * self.feature_dim + k] as f64
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if self.bag_id.is_empty() || self.bag_id.contains(['/', '\\']) || self.bag_id == "." || self.bag_id == ".." {
            return Err(Error::InvalidBag(format!("bad bag_id {:?}", self.bag_id)));
        }
        if n == 0 {
            return Err(Error::InvalidBag(format!("{}: bag has no patches", self.bag_id)));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidBag(format!("{}: need at least 2 classes", self.bag_id)));
        }
        if self.grade.index() >= self.num_classes {
            return Err(Error::InvalidBag(format!(
                "{}: grade {} outside [0, {})",
                self.bag_id, self.grade.0, self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidBag(format!("{}: d_f must be positive", self.bag_id)));
        }
        if self.features.len() != n * self.feature_dim {
            return Err(Error::InvalidBag(format!(
                "{}: {} feature values for N={} d_f={}",
                self.bag_id,
                self.features.len(),
                n,
                self.feature_dim
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for c in &self.coords {
            if !seen.insert(*c) {
                return Err(Error::InvalidBag(format!("{}: duplicate coordinate {:?}", self.bag_id, c)));
            }
        }
        if let Some(index) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("features of {}", self.bag_id),
                index,
            });
        }
        for a in &self.annotations {
            if a.patch_indices.is_empty() {
                return Err(Error::InvalidBag(format!("{}: empty region {}", self.bag_id, a.region_id)));
            }
            if let Some(&i) = a.patch_indices.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidBag(format!(
                    "{}: region {} references patch {} >= N={}",
                    self.bag_id, a.region_id, i, n
                )));
            }
            if a.region_grade.index() >= self.num_classes {
                return Err(Error::InvalidBag(format!(
                    "{}: region {} grade out of range",
                    self.bag_id, a.region_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    bag_id: String,
    grade: GradeLabel,
    #[serde(rename = "C")]
    num_classes: usize,
    #[serde(rename = "N")]
    n: usize,
    d_f: usize,
    coords: Vec<[u32; 2]>,
    features: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    annotations: Vec<RegionAnnotation>,
}

/// Writes `bag` into `directory/<bag_id>/` and returns that path.
pub fn write_bag(bag: &Bag, directory: &Path) -> Result<PathBuf> {
    bag.validate()?;
    let dir = directory.join(&bag.bag_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let manifest = Manifest {
        bag_id: bag.bag_id.clone(),
        grade: bag.grade,
        num_classes: bag.num_classes,
        n: bag.len(),
        d_f: bag.feature_dim,
        coords: bag.coords.iter().map(|&(s, t)| [s, t]).collect(),
        features: FEATURES_FILE.to_string(),
        annotations: bag.annotations.clone(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    let payload_path = dir.join(FEATURES_FILE);
    fs::write(&payload_path, f32_to_le_bytes(&bag.features)).map_err(|e| Error::io(&payload_path, e))?;
    Ok(dir)
}

/// Reads a bag directory written by [`write_bag`].
pub fn read_bag(path: &Path) -> Result<Bag> {
    let manifest_path = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if m.coords.len() != m.n {
        return Err(Error::Manifest {
            path: manifest_path,
            reason: format!("N={} but {} coords", m.n, m.coords.len()),
        });
    }
    if m.features.contains(['/', '\\']) {
        return Err(Error::Manifest {
            path: manifest_path,
            reason: format!("feature file {:?} must be a plain file name", m.features),
        });
    }

    let payload_path = path.join(&m.features);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = (m.n as u64) * (m.d_f as u64) * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::FeatureByteCount {
            path: payload_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let features = le_bytes_to_f32(&bytes);
    if let Some(index) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: payload_path.display().to_string(),
            index,
        });
    }

    let bag = Bag {
        bag_id: m.bag_id,
        grade: m.grade,
        num_classes: m.num_classes,
        coords: m.coords.into_iter().map(|[s, t]| (s, t)).collect(),
        feature_dim: m.d_f,
        features,
        annotations: m.annotations,
    };
    bag.validate().map_err(|e| match e {
        Error::InvalidBag(reason) => Error::Manifest {
            path: manifest_path,
            reason,
        },
        other => other,
    })?;
    Ok(bag)
}

/// Writes every bag under `directory`.
pub fn write_dataset(bags: &[Bag], directory: &Path) -> Result<()> {
    fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    for bag in bags {
        write_bag(bag, directory)?;
    }
    Ok(())
}

/// Loads every bag directory under `directory`, sorted by directory name.
pub fn read_dataset(directory: &Path) -> Result<Vec<Bag>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(directory).map_err(|e| Error::io(directory, e))? {
        let entry = entry.map_err(|e| Error::io(directory, e))?;
        let p = entry.path();
        if p.is_dir() && p.join(MANIFEST_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    let bags = dirs.iter().map(|d| read_bag(d)).collect::<Result<Vec<_>>>()?;
    if let Some(first) = bags.first() {
        if let Some(b) = bags
            .iter()
            .find(|b| b.num_classes != first.num_classes || b.feature_dim != first.feature_dim)
        {
            return Err(Error::InvalidBag(format!(
                "{}: C/d_f differ from {} within one dataset",
                b.bag_id, first.bag_id
            )));
        }
    }
    Ok(bags)
}

pub(crate) fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn le_bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bag() -> Bag {
        Bag {
            bag_id: "b0".into(),
            grade: GradeLabel(0),
            num_classes: 4,
            coords: vec![(0, 0)],
            feature_dim: 4,
            features: vec![0.0; 4],
            annotations: vec![],
        }
    }

    #[test]
    fn zero_bag_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let bag = tiny_bag();
        let p = write_bag(&bag, dir.path()).unwrap();
        assert_eq!(read_bag(&p).unwrap(), bag);
    }

    #[test]
    fn truncated_payload_is_byte_count_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_bag(&tiny_bag(), dir.path()).unwrap();
        let fp = p.join(FEATURES_FILE);
        let bytes = fs::read(&fp).unwrap();
        fs::write(&fp, &bytes[..bytes.len() - 1]).unwrap();
        match read_bag(&p) {
            Err(Error::FeatureByteCount { expected, actual, .. }) => {
                assert_eq!(expected, 16);
                assert_eq!(actual, 15);
            }
            other => panic!("expected byte-count error, got {other:?}"),
        }
    }

    #[test]
    fn nan_payload_is_non_finite_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_bag(&tiny_bag(), dir.path()).unwrap();
        let mut vals = vec![0.0f32; 4];
        vals[2] = f32::NAN;
        fs::write(p.join(FEATURES_FILE), f32_to_le_bytes(&vals)).unwrap();
        assert!(matches!(read_bag(&p), Err(Error::NonFinite { index: 2, .. })));
    }

    #[test]
    fn garbage_manifest_is_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_bag(&tiny_bag(), dir.path()).unwrap();
        fs::write(p.join(MANIFEST_FILE), "{\"bag_id\": 3}").unwrap();
        assert!(matches!(read_bag(&p), Err(Error::Manifest { .. })));
    }

    #[test]
    fn duplicate_coords_rejected() {
        let mut bag = tiny_bag();
        bag.coords = vec![(1, 1), (1, 1)];
        bag.features = vec![0.0; 8];
        assert!(matches!(bag.validate(), Err(Error::InvalidBag(_))));
    }

    #[test]
    fn annotation_index_out_of_range_rejected() {
        let mut bag = tiny_bag();
        bag.annotations.push(RegionAnnotation {
            region_id: "r".into(),
            patch_indices: vec![3],
            region_grade: GradeLabel(1),
        });
        assert!(bag.validate().is_err());
    }
}
