//! Image to bag: Otsu tissue masking, tiling, gradient-entropy filtering and
//! an external feature-provider contract.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::bagio::{le_bytes_to_f32, Bag, GradeLabel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub tile_size: u32,
    /// Minimum tissue fraction for a tile to be kept.
    pub coverage: f64,
    /// Components smaller than this many tiles' worth of pixels are dropped.
    pub min_component_tiles: f64,
    pub entropy_threshold: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            tile_size: 448,
            coverage: 0.5,
            min_component_tiles: 20.0,
            entropy_threshold: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    /// Row-major, `true` on tissue.
    pub mask: Vec<bool>,
    pub threshold: Option<u8>,
    /// Set when the image has a single gray level.
    pub degenerate: bool,
}

impl TissueMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.mask[(y * self.width + x) as usize]
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn to_gray(img: &RgbImage) -> GrayImage {
    image::imageops::grayscale(img)
}

/// Threshold `t` maximizing the between-class variance of `{<= t}` vs `{> t}`.
/// `None` when every split has zero between-class variance.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(u8, f64)> = None;
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let var = w0 * w1 * diff * diff;
        if var > 0.0 && best.is_none_or(|(_, v)| var > v) {
            best = Some((t as u8, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Tissue is the darker side of the Otsu split; 8-connected components smaller than
/// `min_area` pixels are removed.
pub fn otsu_tissue_mask(img: &RgbImage, min_area: usize) -> TissueMask {
    let gray = to_gray(img);
    let (w, h) = gray.dimensions();
    let mut hist = [0u64; 256];
    for p in gray.pixels() {
        hist[p.0[0] as usize] += 1;
    }
    let Some(t) = otsu_threshold(&hist) else {
        return TissueMask {
            width: w,
            height: h,
            mask: vec![false; (w * h) as usize],
            threshold: None,
            degenerate: true,
        };
    };
    let mut mask: Vec<bool> = gray.pixels().map(|p| p.0[0] <= t).collect();
    remove_small_components(&mut mask, w as usize, h as usize, min_area);
    TissueMask {
        width: w,
        height: h,
        mask,
        threshold: Some(t),
        degenerate: false,
    }
}

fn remove_small_components(mask: &mut [bool], w: usize, h: usize, min_area: usize) {
    if min_area <= 1 {
        return;
    }
    let mut seen = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        comp.push(j);
                        queue.push_back(j);
                    }
                }
            }
        }
        if comp.len() < min_area {
            for i in comp {
                mask[i] = false;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tile {
    /// `(row, col)` on the tile grid.
    pub coord: (u32, u32),
    pub crop: RgbImage,
}

/// Non-overlapping grid tiles whose tissue fraction is at least `coverage`.
/// Partial tiles at the right and bottom edges are ignored.
pub fn tile(img: &RgbImage, mask: &TissueMask, tile_size: u32, coverage: f64) -> Vec<Tile> {
    assert!(tile_size >= 1, "tile size must be positive");
    let (w, h) = img.dimensions();
    let mut out = Vec::new();
    let area = (tile_size * tile_size) as f64;
    for row in 0..h / tile_size {
        for col in 0..w / tile_size {
            let (x0, y0) = (col * tile_size, row * tile_size);
            let mut tissue = 0usize;
            for y in y0..y0 + tile_size {
                for x in x0..x0 + tile_size {
                    tissue += mask.get(x, y) as usize;
                }
            }
            if tissue as f64 / area >= coverage {
                out.push(Tile {
                    coord: (row, col),
                    crop: image::imageops::crop_imm(img, x0, y0, tile_size, tile_size).to_image(),
                });
            }
        }
    }
    out
}

/// Shannon entropy (bits) of the 256-bin histogram of the central-difference gradient
/// magnitude, binned over its observed range.
pub fn gradient_entropy(gray: &GrayImage) -> f64 {
    let (w, h) = gray.dimensions();
    if w == 0 || h == 0 {
        return 0.0;
    }
    let px = |x: i64, y: i64| -> f64 {
        let cx = x.clamp(0, w as i64 - 1) as u32;
        let cy = y.clamp(0, h as i64 - 1) as u32;
        gray.get_pixel(cx, cy).0[0] as f64
    };
    let mut mags = Vec::with_capacity((w * h) as usize);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (px(x + 1, y) - px(x - 1, y)) / 2.0;
            let gy = (px(x, y + 1) - px(x, y - 1)) / 2.0;
            mags.push((gx * gx + gy * gy).sqrt());
        }
    }
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 0.0;
    }
    let mut hist = [0u64; 256];
    for m in &mags {
        let b = (((m - lo) / (hi - lo)) * 256.0).floor() as usize;
        hist[b.min(255)] += 1;
    }
    let n = mags.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Keeps a crop iff its gradient entropy is strictly above `threshold`.
pub fn entropy_filter(crop: &RgbImage, threshold: f64) -> bool {
    passes_entropy(gradient_entropy(&to_gray(crop)), threshold)
}

pub fn passes_entropy(entropy: f64, threshold: f64) -> bool {
    entropy > threshold
}

/// Turns tile crops into feature rows.
pub trait FeatureProvider {
    fn features(&self, crops: &[RgbImage]) -> Result<Vec<Vec<f32>>>;
}

/// Runs `program args.. <crops_dir> <out_file>`. The crops are written as
/// `crops_dir/tile_00000.png`, ... in bag order; the program must write `N x d_f`
/// little-endian f32 values to `out_file`.
#[derive(Clone, Debug)]
pub struct CommandProvider {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl FeatureProvider for CommandProvider {
    fn features(&self, crops: &[RgbImage]) -> Result<Vec<Vec<f32>>> {
        if crops.is_empty() {
            return Ok(Vec::new());
        }
        let dir = tempfile::tempdir().map_err(|e| Error::Provider(e.to_string()))?;
        let crops_dir = dir.path().join("crops");
        std::fs::create_dir(&crops_dir).map_err(|e| Error::io(&crops_dir, e))?;
        for (i, c) in crops.iter().enumerate() {
            c.save(crops_dir.join(format!("tile_{i:05}.png")))?;
        }
        let out = dir.path().join("features.f32");
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&crops_dir)
            .arg(&out)
            .status()
            .map_err(|e| Error::Provider(format!("{}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Provider(format!("{} exited with {status}", self.program.display())));
        }
        let bytes = std::fs::read(&out).map_err(|e| Error::io(&out, e))?;
        let n = crops.len();
        if bytes.len() % 4 != 0 || (bytes.len() / 4) % n != 0 || bytes.is_empty() {
            return Err(Error::Provider(format!(
                "{} bytes do not divide into {n} rows of f32",
                bytes.len()
            )));
        }
        let values = le_bytes_to_f32(&bytes);
        let d = values.len() / n;
        Ok(values.chunks(d).map(|c| c.to_vec()).collect())
    }
}

/// Built-in provider of simple color and texture statistics: per-channel mean and
/// standard deviation plus gradient entropy. Meant for smoke tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct ColorStatsProvider;

impl FeatureProvider for ColorStatsProvider {
    fn features(&self, crops: &[RgbImage]) -> Result<Vec<Vec<f32>>> {
        Ok(crops
            .iter()
            .map(|c| {
                let n = (c.width() * c.height()).max(1) as f64;
                let mut sum = [0.0f64; 3];
                let mut sq = [0.0f64; 3];
                for p in c.pixels() {
                    for k in 0..3 {
                        let v = p.0[k] as f64 / 255.0;
                        sum[k] += v;
                        sq[k] += v * v;
                    }
                }
                let mut f: Vec<f32> = Vec::with_capacity(7);
                for k in 0..3 {
                    let m = sum[k] / n;
                    f.push(m as f32);
                    f.push((sq[k] / n - m * m).max(0.0).sqrt() as f32);
                }
                f.push(gradient_entropy(&to_gray(c)) as f32 / 8.0);
                f
            })
            .collect())
    }
}

/// Full pipeline from one RGB image to a bag.
pub fn ingest_image(
    img: &RgbImage,
    bag_id: &str,
    grade: GradeLabel,
    num_classes: usize,
    cfg: &IngestConfig,
    provider: &dyn FeatureProvider,
) -> Result<Bag> {
    let min_area = (cfg.min_component_tiles * (cfg.tile_size as f64).powi(2)).ceil() as usize;
    let mask = otsu_tissue_mask(img, min_area);
    if mask.degenerate {
        log::warn!("{bag_id}: constant image, no tissue found");
    }
    let tiles: Vec<Tile> = tile(img, &mask, cfg.tile_size, cfg.coverage)
        .into_iter()
        .filter(|t| entropy_filter(&t.crop, cfg.entropy_threshold))
        .collect();
    let crops: Vec<RgbImage> = tiles.iter().map(|t| t.crop.clone()).collect();
    let rows = provider.features(&crops)?;
    if rows.len() != tiles.len() {
        return Err(Error::Provider(format!("{} feature rows for {} tiles", rows.len(), tiles.len())));
    }
    let feature_dim = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != feature_dim) {
        return Err(Error::Provider("feature rows differ in length".into()));
    }
    let bag = Bag {
        bag_id: bag_id.to_string(),
        grade,
        num_classes,
        coords: tiles.iter().map(|t| t.coord).collect(),
        feature_dim,
        features: rows.into_iter().flatten().collect(),
        annotations: Vec::new(),
    };
    bag.validate()?;
    Ok(bag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn bimodal_image_masks_dark_half() {
        let img = RgbImage::from_fn(20, 10, |x, _| if x < 10 { Rgb([10, 10, 10]) } else { Rgb([240, 240, 240]) });
        let m = otsu_tissue_mask(&img, 0);
        let t = m.threshold.unwrap();
        assert!((10..240).contains(&t));
        assert_eq!(m.area(), 100);
        assert!(m.get(0, 0) && !m.get(19, 0));
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = RgbImage::from_pixel(8, 8, Rgb([77, 77, 77]));
        let m = otsu_tissue_mask(&img, 0);
        assert!(m.degenerate);
        assert_eq!(m.area(), 0);
    }

    #[test]
    fn small_components_removed() {
        let mut img = RgbImage::from_pixel(30, 30, Rgb([250, 250, 250]));
        for y in 0..10 {
            for x in 0..10 {
                img.put_pixel(x, y, Rgb([5, 5, 5]));
            }
        }
        img.put_pixel(25, 25, Rgb([5, 5, 5]));
        let m = otsu_tissue_mask(&img, 20);
        assert_eq!(m.area(), 100);
        assert!(!m.get(25, 25));
    }

    #[test]
    fn full_tissue_grid() {
        let img = RgbImage::from_pixel(896, 896, Rgb([1, 2, 3]));
        let mask = TissueMask {
            width: 896,
            height: 896,
            mask: vec![true; 896 * 896],
            threshold: Some(128),
            degenerate: false,
        };
        let coords: Vec<_> = tile(&img, &mask, 448, 0.5).iter().map(|t| t.coord).collect();
        assert_eq!(coords, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let empty = TissueMask {
            mask: vec![false; 896 * 896],
            ..mask
        };
        assert!(tile(&img, &empty, 448, 0.5).is_empty());
    }

    #[test]
    fn constant_crop_has_zero_entropy() {
        let img = RgbImage::from_pixel(16, 16, Rgb([90, 90, 90]));
        assert_eq!(gradient_entropy(&to_gray(&img)), 0.0);
        assert!(!entropy_filter(&img, 4.0));
    }

    #[test]
    fn entropy_threshold_is_strict() {
        assert!(!passes_entropy(4.0, 4.0));
        assert!(passes_entropy(4.000_001, 4.0));
    }

    #[test]
    fn noise_crop_is_kept() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img = RgbImage::from_fn(64, 64, |_, _| {
            let v: u8 = rng.random();
            Rgb([v, v, v])
        });
        assert!(gradient_entropy(&to_gray(&img)) > 6.0);
        assert!(entropy_filter(&img, 4.0));
    }

    #[test]
    fn entropy_ignores_brightness_offset() {
        let a = GrayImage::from_fn(32, 32, |x, y| image::Luma([((x * 7 + y * 3) % 50) as u8]));
        let b = GrayImage::from_fn(32, 32, |x, y| image::Luma([((x * 7 + y * 3) % 50) as u8 + 100]));
        assert_eq!(gradient_entropy(&a), gradient_entropy(&b));
    }
}
