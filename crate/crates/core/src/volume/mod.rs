//! Volume data model: a one-channel 3D intensity grid plus free-form metadata.
//!
//! Voxels are stored row-major over `(H, W, D)`, depth fastest:
//! `index = (i * W + j) * D + k`.

mod filter;
mod io;
mod nifti;
mod window;

use std::collections::BTreeMap;

pub use filter::gaussian_blur;
pub use io::{load_volume, save_volume};
pub use nifti::read_nifti;
pub use window::{merge_windows, split_windows, PadPolicy, WindowAxis, WindowPlan, WindowSet};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
    normalized: bool,
    pub meta: BTreeMap<String, String>,
}

impl Volume {
    /// Builds a volume, checking the element count and finiteness.
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::shape(&[1, 1, 1], &shape));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(&[n], &[data.len()]));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite voxel {bad}")));
        }
        let normalized = data.iter().all(|&v| (0.0..=1.0).contains(&v));
        Ok(Self {
            shape,
            data,
            normalized,
            meta: BTreeMap::new(),
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        assert!(shape.iter().all(|&s| s > 0), "empty volume shape {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            normalized: (0.0..=1.0).contains(&value),
            meta: BTreeMap::new(),
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable voxel access. Clears the normalized flag unless the caller
    /// re-establishes it with [`Volume::refresh_normalized`].
    pub fn data_mut(&mut self) -> &mut [f32] {
        self.normalized = false;
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// True when every intensity is known to lie in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Re-derives the normalized flag from the data.
    pub fn refresh_normalized(&mut self) -> bool {
        self.normalized = self.data.iter().all(|&v| (0.0..=1.0).contains(&v));
        self.normalized
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
        if !(0.0..=1.0).contains(&v) {
            self.normalized = false;
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Min-max rescales intensities to `[0, 1]`.
pub fn normalize(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if hi <= lo {
        return Err(Error::DegenerateVolume(lo));
    }
    if lo == 0.0 && hi == 1.0 {
        let mut out = v.clone();
        out.normalized = true;
        return Ok(out);
    }
    let (lo64, span) = (lo as f64, hi as f64 - lo as f64);
    let data = v
        .data
        .iter()
        .map(|&x| (((x as f64 - lo64) / span) as f32).clamp(0.0, 1.0))
        .collect();
    Ok(Volume {
        shape: v.shape,
        data,
        normalized: true,
        meta: v.meta.clone(),
    })
}
