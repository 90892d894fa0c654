use image::{Rgb, RgbImage};
use ndarray::Array2;

use super::PrPoint;

const BACKGROUND: Rgb<u8> = Rgb([245, 245, 245]);

// Anchors of a perceptually ordered blue-to-yellow ramp.
const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

const CLASS_COLORS: [[u8; 3]; 6] = [
    [120, 120, 120],
    [46, 134, 222],
    [241, 196, 15],
    [214, 48, 49],
    [142, 68, 173],
    [39, 174, 96],
];

fn ramp(v: f64) -> Rgb<u8> {
    let x = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (RAMP[i][k] + f * (RAMP[i + 1][k] - RAMP[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn grid_canvas(coords: &[(u32, u32)], cell: u32) -> RgbImage {
    let rows = coords.iter().map(|c| c.0).max().map_or(1, |m| m + 1);
    let cols = coords.iter().map(|c| c.1).max().map_or(1, |m| m + 1);
    RgbImage::from_pixel(cols * cell, rows * cell, BACKGROUND)
}

fn fill_cell(img: &mut RgbImage, (s, t): (u32, u32), cell: u32, color: Rgb<u8>) {
    for y in s * cell..(s + 1) * cell {
        for x in t * cell..(t + 1) * cell {
            img.put_pixel(x, y, color);
        }
    }
}

/// Patch grid colored by normalized attention in `[0, 1]`.
pub fn render_attention_heatmap(coords: &[(u32, u32)], values: &[f64], cell: u32) -> RgbImage {
    let mut img = grid_canvas(coords, cell);
    for (&c, &v) in coords.iter().zip(values) {
        fill_cell(&mut img, c, cell, ramp(v));
    }
    img
}

/// Patch grid colored by argmax class, blended toward white as confidence drops.
pub fn render_probability_heatmap(coords: &[(u32, u32)], probs: &Array2<f64>, cell: u32) -> RgbImage {
    let mut img = grid_canvas(coords, cell);
    for (n, &c) in coords.iter().enumerate() {
        let row = probs.row(n);
        let k = crate::util::argmax(row.as_slice().expect("contiguous"));
        let base = CLASS_COLORS[k % CLASS_COLORS.len()];
        let p = row[k];
        let mix = |b: u8| (255.0 - p * (255.0 - b as f64)).round() as u8;
        fill_cell(&mut img, c, cell, Rgb([mix(base[0]), mix(base[1]), mix(base[2])]));
    }
    img
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// One precision-recall polyline per class on a unit square with a small margin.
pub fn render_pr_curves(curves: &[Vec<PrPoint>], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let margin = (size / 10) as i64;
    let span = size as i64 - 2 * margin;
    let to_px = |recall: f64, precision: f64| {
        (
            margin + (recall * span as f64).round() as i64,
            margin + ((1.0 - precision) * span as f64).round() as i64,
        )
    };
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), axis);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), axis);
    for (k, curve) in curves.iter().enumerate() {
        let c = CLASS_COLORS[k % CLASS_COLORS.len()];
        let color = Rgb(c);
        let mut prev = curve.first().map(|p| to_px(0.0, p.precision));
        for p in curve {
            let cur = to_px(p.recall, p.precision);
            if let Some(q) = prev {
                draw_line(&mut img, q, cur, color);
            }
            prev = Some(cur);
        }
    }
    img
}
