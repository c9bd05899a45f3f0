use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::volume::Volume;

use super::ssim::slice;

/// Activations of one layer, `[channels, rows, cols]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Source of per-layer features for a 3-channel 2D image.
pub trait FeatureExtractor {
    /// `image` is `[3, rows, cols]` row-major.
    fn features(&self, image: &[f64], rows: usize, cols: usize) -> Result<Vec<FeatureMap>>;

    /// Per-channel non-negative weights of layer `l`.
    fn layer_weights(&self, layer: usize) -> &[f64];
}

#[derive(Debug, Clone)]
struct Conv2d {
    cout: usize,
    cin: usize,
    stride: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Conv2d {
    fn new(cout: usize, cin: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let w = (0..cout * cin * 9)
            .map(|_| std * { let z: f64 = StandardNormal.sample(rng); z })
            .collect::<Vec<f64>>();
        let b = (0..cout).map(|_| 0.01 * { let z: f64 = StandardNormal.sample(rng); z }).collect::<Vec<f64>>();
        Self { cout, cin, stride, w, b }
    }

    /// 3×3 convolution with zero padding 1, followed by ReLU.
    fn forward(&self, x: &[f64], rows: usize, cols: usize) -> FeatureMap {
        let or = (rows - 1) / self.stride + 1;
        let oc = (cols - 1) / self.stride + 1;
        let mut out = vec![0.0; self.cout * or * oc];
        for co in 0..self.cout {
            for r in 0..or {
                for c in 0..oc {
                    let mut acc = self.b[co];
                    for ci in 0..self.cin {
                        for kr in 0..3 {
                            let ir = (r * self.stride + kr) as isize - 1;
                            if ir < 0 || ir >= rows as isize {
                                continue;
                            }
                            for kc in 0..3 {
                                let ic = (c * self.stride + kc) as isize - 1;
                                if ic < 0 || ic >= cols as isize {
                                    continue;
                                }
                                acc += self.w[((co * self.cin + ci) * 3 + kr) * 3 + kc]
                                    * x[(ci * rows + ir as usize) * cols + ic as usize];
                            }
                        }
                    }
                    out[(co * or + r) * oc + c] = acc.max(0.0);
                }
            }
        }
        FeatureMap {
            channels: self.cout,
            rows: or,
            cols: oc,
            data: out,
        }
    }
}

/// Small seeded convolutional feature extractor standing in for a
/// pretrained backbone.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    layers: Vec<Conv2d>,
    weights: Vec<Vec<f64>>,
}

impl ToyExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![Conv2d::new(8, 3, 1, &mut rng), Conv2d::new(16, 8, 2, &mut rng)];
        let weights = layers
            .iter()
            .map(|l| (0..l.cout).map(|_| 0.5 + rand::Rng::random::<f64>(&mut rng)).collect())
            .collect();
        Self { layers, weights }
    }

    /// Global-average-pooled features of the central slices, one vector per
    /// volume; used as FID embeddings.
    pub fn embed(&self, v: &Volume, n_slices: usize) -> Result<Vec<f64>> {
        let mut acc: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for (axis, idx) in central_slices(v.shape(), n_slices) {
            let (img, rows, cols) = rgb_slice(v, axis, idx);
            let maps = self.features(&img, rows, cols)?;
            let pooled: Vec<f64> = maps
                .iter()
                .flat_map(|m| {
                    let hw = m.rows * m.cols;
                    (0..m.channels).map(move |c| m.data[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
                })
                .collect();
            if acc.is_empty() {
                acc = pooled;
            } else {
                acc.iter_mut().zip(&pooled).for_each(|(a, p)| *a += p);
            }
            count += 1;
        }
        acc.iter_mut().for_each(|a| *a /= count as f64);
        Ok(acc)
    }
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self::new(0x1F1F5)
    }
}

impl FeatureExtractor for ToyExtractor {
    fn features(&self, image: &[f64], rows: usize, cols: usize) -> Result<Vec<FeatureMap>> {
        if image.len() != 3 * rows * cols {
            return Err(Error::shape(&[3, rows, cols], &[image.len()]));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = image.to_vec();
        let (mut r, mut c) = (rows, cols);
        for layer in &self.layers {
            let m = layer.forward(&cur, r, c);
            cur = m.data.clone();
            r = m.rows;
            c = m.cols;
            out.push(m);
        }
        Ok(out)
    }

    fn layer_weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }
}

/// Up to `b` slice indices centred on the middle of each axis.
pub fn central_slices(shape: [usize; 3], b: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (axis, &n) in shape.iter().enumerate() {
        let take = b.min(n);
        let start = n / 2 - take / 2;
        out.extend((start..start + take).map(|i| (axis, i)));
    }
    out
}

fn rgb_slice(v: &Volume, axis: usize, idx: usize) -> (Vec<f64>, usize, usize) {
    let (s, rows, cols) = slice(v, axis, idx);
    let mut img = Vec::with_capacity(3 * s.len());
    for _ in 0..3 {
        img.extend_from_slice(&s);
    }
    (img, rows, cols)
}

/// Distance between two feature stacks of one slice pair.
pub fn lpips_features<E: FeatureExtractor + ?Sized>(fx: &[FeatureMap], fy: &[FeatureMap], extractor: &E) -> Result<f64> {
    if fx.len() != fy.len() || fx.is_empty() {
        return Err(Error::LengthMismatch(fx.len(), fy.len()));
    }
    let mut total = 0.0;
    for (l, (a, b)) in fx.iter().zip(fy).enumerate() {
        let w = extractor.layer_weights(l);
        if w.len() != a.channels || a.data.len() != b.data.len() {
            return Err(Error::LengthMismatch(w.len(), a.channels));
        }
        let hw = a.rows * a.cols;
        let mut s = 0.0;
        for p in 0..hw {
            for (c, wc) in w.iter().enumerate() {
                let d = wc * (a.data[c * hw + p] - b.data[c * hw + p]);
                s += d * d;
            }
        }
        total += s / hw as f64;
    }
    Ok(total)
}

/// Mean slice distance over `b` central slices per axis.
pub fn lpips<E: FeatureExtractor + ?Sized>(x: &Volume, y: &Volume, extractor: &E, b: usize) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(&x.shape(), &y.shape()));
    }
    if b == 0 {
        return Err(Error::Config("lpips needs at least one slice".into()));
    }
    let slices = central_slices(x.shape(), b);
    let mut total = 0.0;
    for &(axis, idx) in &slices {
        let (ix, rows, cols) = rgb_slice(x, axis, idx);
        let (iy, _, _) = rgb_slice(y, axis, idx);
        let fx = extractor.features(&ix, rows, cols)?;
        let fy = extractor.features(&iy, rows, cols)?;
        total += lpips_features(&fx, &fy, extractor)?;
    }
    Ok(total / slices.len() as f64)
}
