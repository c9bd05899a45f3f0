//! Minimal static PNG charts: matrix heatmaps and line overlays.

use std::path::Path;

use anyhow::{ensure, Result};
use image::{Rgb, RgbImage};

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn colormap(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (VIRIDIS[i][k] + f * (VIRIDIS[i + 1][k] - VIRIDIS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Square cells coloured by value on `[0, vmax]`.
pub fn heatmap(matrix: &[Vec<f64>], vmax: f64, path: &Path) -> Result<()> {
    ensure!(!matrix.is_empty(), "empty matrix");
    let n = matrix.len();
    let cell = (480 / n).clamp(8, 64) as u32;
    let size = cell * n as u32;
    let vmax = if vmax > 0.0 { vmax } else { 1.0 };
    let img = RgbImage::from_fn(size, size, |x, y| {
        let (i, j) = ((y / cell) as usize, (x / cell) as usize);
        if x % cell == 0 || y % cell == 0 {
            Rgb([255, 255, 255])
        } else {
            colormap(matrix[i][j] / vmax)
        }
    });
    img.save(path)?;
    Ok(())
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
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

/// Overlaid polylines on shared axes; each series gets a palette colour.
pub fn lines(series: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let pts: Vec<&(f64, f64)> = series.iter().flatten().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    ensure!(!pts.is_empty(), "nothing to plot");
    let (w, h, m) = (640u32, 400u32, 30i64);
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y0 = y0.min(p.1);
        y1 = y1.max(p.1);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = m + ((x - x0) / (x1 - x0) * (w as i64 - 2 * m) as f64).round() as i64;
        let py = h as i64 - m - ((y - y0) / (y1 - y0) * (h as i64 - 2 * m) as f64).round() as i64;
        (px, py)
    };
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (m, h as i64 - m), (w as i64 - m, h as i64 - m), axis);
    line(&mut img, (m, m), (m, h as i64 - m), axis);
    for (k, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        for pair in s.windows(2) {
            if pair.iter().all(|p| p.0.is_finite() && p.1.is_finite()) {
                line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), c);
            }
        }
    }
    img.save(path)?;
    Ok(())
}
