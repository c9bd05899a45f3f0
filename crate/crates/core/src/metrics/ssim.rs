use crate::error::{Error, Result};
use crate::volume::Volume;

pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;
pub const C3: f64 = C2 / 2.0;
pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;

fn window_1d() -> [f64; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    w
}

/// Gaussian-weighted local mean of a 2D image, with the window truncated at
/// the borders and its weights renormalized.
fn local_mean(img: &[f64], rows: usize, cols: usize, w: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let pass = |src: &[f64], out: &mut [f64], along_rows: bool| {
        let (n_line, n_pos) = if along_rows { (cols, rows) } else { (rows, cols) };
        for line in 0..n_line {
            for p in 0..n_pos {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for t in -r..=r {
                    let q = p as isize + t;
                    if q < 0 || q >= n_pos as isize {
                        continue;
                    }
                    let q = q as usize;
                    let idx = if along_rows { q * cols + line } else { line * cols + q };
                    let wt = w[(t + r) as usize];
                    acc += wt * src[idx];
                    norm += wt;
                }
                let idx = if along_rows { p * cols + line } else { line * cols + p };
                out[idx] = acc / norm;
            }
        }
    };
    let mut tmp = vec![0.0; img.len()];
    let mut out = vec![0.0; img.len()];
    pass(img, &mut tmp, false);
    pass(&tmp, &mut out, true);
    out
}

/// Mean SSIM and Struct-SSIM maps of one 2D slice pair.
pub fn ssim_2d(x: &[f64], y: &[f64], rows: usize, cols: usize) -> (f64, f64) {
    let w = window_1d();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = local_mean(x, rows, cols, &w);
    let my = local_mean(y, rows, cols, &w);
    let mxx = local_mean(&prod(x, x), rows, cols, &w);
    let myy = local_mean(&prod(y, y), rows, cols, &w);
    let mxy = local_mean(&prod(x, y), rows, cols, &w);
    let mut s = 0.0;
    let mut st = 0.0;
    for i in 0..x.len() {
        let vx = (mxx[i] - mx[i] * mx[i]).max(0.0);
        let vy = (myy[i] - my[i] * my[i]).max(0.0);
        let cxy = mxy[i] - mx[i] * my[i];
        s += ((2.0 * mx[i] * my[i] + C1) * (2.0 * cxy + C2))
            / ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
        st += (cxy + C3) / ((vx * vy).sqrt() + C3);
    }
    let n = x.len() as f64;
    (s / n, st / n)
}

/// Extracts slice `idx` along `axis` as a row-major 2D image.
pub(crate) fn slice(v: &Volume, axis: usize, idx: usize) -> (Vec<f64>, usize, usize) {
    let [h, w, d] = v.shape();
    let (rows, cols) = match axis {
        0 => (w, d),
        1 => (h, d),
        _ => (h, w),
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (i, j, k) = match axis {
                0 => (idx, r, c),
                1 => (r, idx, c),
                _ => (r, c, idx),
            };
            out.push(v.get(i, j, k) as f64);
        }
    }
    (out, rows, cols)
}

/// Slice-wise 3D SSIM: every slice along each axis, averaged per axis and then
/// over the three axes. Returns `(ssim, struct_ssim)`.
pub fn ssim_pair(x: &Volume, y: &Volume) -> Result<(f64, f64)> {
    if x.shape() != y.shape() {
        return Err(Error::shape(&x.shape(), &y.shape()));
    }
    let shape = x.shape();
    let mut s = 0.0;
    let mut st = 0.0;
    for axis in 0..3 {
        let (mut sa, mut sta) = (0.0, 0.0);
        for idx in 0..shape[axis] {
            let (a, rows, cols) = slice(x, axis, idx);
            let (b, _, _) = slice(y, axis, idx);
            let (p, q) = ssim_2d(&a, &b, rows, cols);
            sa += p;
            sta += q;
        }
        s += sa / shape[axis] as f64;
        st += sta / shape[axis] as f64;
    }
    Ok((s / 3.0, st / 3.0))
}
