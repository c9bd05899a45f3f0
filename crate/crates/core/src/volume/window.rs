//! Moving-window decomposition of a volume along one axis, and the inverse merge.

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowAxis {
    Height,
    Width,
    #[default]
    Depth,
}

impl WindowAxis {
    pub fn index(self) -> usize {
        match self {
            WindowAxis::Height => 0,
            WindowAxis::Width => 1,
            WindowAxis::Depth => 2,
        }
    }
}

/// How slices past the end of the axis are synthesized when the window is
/// longer than the axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadPolicy {
    #[default]
    Reflect,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowPlan {
    #[serde(default)]
    pub axis: WindowAxis,
    pub window_size: usize,
    pub stride: usize,
    #[serde(default)]
    pub pad_policy: PadPolicy,
}

impl WindowPlan {
    pub fn new(window_size: usize, stride: usize) -> Self {
        Self {
            axis: WindowAxis::Depth,
            window_size,
            stride,
            pad_policy: PadPolicy::Reflect,
        }
    }

    /// Slice start indices covering `[0, len)`. The last window is clamped so it
    /// ends exactly on the final slice. Windows longer than the axis yield a
    /// single window at offset 0 over the padded axis.
    pub fn offsets(&self, len: usize) -> Result<Vec<usize>> {
        self.validate(len)?;
        let w = self.window_size;
        if w >= len {
            return Ok(vec![0]);
        }
        let mut out = Vec::new();
        let mut o = 0;
        loop {
            if o + w >= len {
                out.push(len - w);
                return Ok(out);
            }
            out.push(o);
            o += self.stride;
        }
    }

    fn validate(&self, len: usize) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::InvalidPlan("window_size must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidPlan("stride must be positive".into()));
        }
        if self.stride > self.window_size && self.window_size < len {
            return Err(Error::InvalidPlan(format!(
                "stride {} larger than window {} leaves gaps",
                self.stride, self.window_size
            )));
        }
        if self.window_size > len {
            let pad = self.window_size - len;
            match self.pad_policy {
                PadPolicy::Zero => {}
                PadPolicy::Reflect if pad < len => {}
                PadPolicy::Reflect => {
                    return Err(Error::InvalidPlan(format!(
                        "window {} cannot be reached by reflecting an axis of {len} slices",
                        self.window_size
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Volume>,
    pub offsets: Vec<usize>,
    pub original_shape: [usize; 3],
    pub axis: WindowAxis,
}

/// Source slice for a (possibly padded) position along an axis of `len` slices.
fn source_slice(pos: usize, len: usize, pad: PadPolicy) -> Option<usize> {
    if pos < len {
        return Some(pos);
    }
    match pad {
        PadPolicy::Zero => None,
        PadPolicy::Reflect => Some(len - 2 - (pos - len)),
    }
}

fn extract(v: &Volume, axis: usize, start: usize, size: usize, pad: PadPolicy) -> Volume {
    let src_shape = v.shape();
    let mut shape = src_shape;
    shape[axis] = size;
    let len = src_shape[axis];
    let mut out = Volume::zeros(shape);
    let data = v.data();
    let dst = out.data_mut();
    let mut n = 0;
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let mut idx = [i, j, k];
                idx[axis] += start;
                if let Some(s) = source_slice(idx[axis], len, pad) {
                    idx[axis] = s;
                    dst[n] = data[(idx[0] * src_shape[1] + idx[1]) * src_shape[2] + idx[2]];
                }
                n += 1;
            }
        }
    }
    out.refresh_normalized();
    out.meta = v.meta.clone();
    out
}

pub fn split_windows(v: &Volume, plan: &WindowPlan) -> Result<WindowSet> {
    let axis = plan.axis.index();
    let offsets = plan.offsets(v.shape()[axis])?;
    let windows = offsets
        .iter()
        .map(|&o| extract(v, axis, o, plan.window_size, plan.pad_policy))
        .collect();
    Ok(WindowSet {
        windows,
        offsets,
        original_shape: v.shape(),
        axis: plan.axis,
    })
}

/// Reassembles a volume; slices covered by several windows take the
/// arithmetic mean of the contributing windows.
pub fn merge_windows(ws: &WindowSet) -> Result<Volume> {
    let axis = ws.axis.index();
    let shape = ws.original_shape;
    if ws.windows.is_empty() || ws.windows.len() != ws.offsets.len() {
        return Err(Error::InconsistentWindowSet(format!(
            "{} windows for {} offsets",
            ws.windows.len(),
            ws.offsets.len()
        )));
    }
    if ws.offsets.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::InconsistentWindowSet("offsets not strictly increasing".into()));
    }
    let size = ws.windows[0].shape()[axis];
    for w in &ws.windows {
        let mut expect = shape;
        expect[axis] = size;
        if w.shape() != expect {
            return Err(Error::InconsistentWindowSet(format!(
                "window shape {:?}, expected {:?}",
                w.shape(),
                expect
            )));
        }
    }
    let mut sum = vec![0.0f64; shape.iter().product()];
    let mut count = vec![0u32; shape[axis]];
    for (w, &o) in ws.windows.iter().zip(&ws.offsets) {
        for t in 0..size {
            if o + t < shape[axis] {
                count[o + t] += 1;
            }
        }
        let wd = w.data();
        let ws_shape = w.shape();
        for i in 0..ws_shape[0] {
            for j in 0..ws_shape[1] {
                for k in 0..ws_shape[2] {
                    let mut idx = [i, j, k];
                    idx[axis] += o;
                    if idx[axis] >= shape[axis] {
                        continue;
                    }
                    sum[(idx[0] * shape[1] + idx[1]) * shape[2] + idx[2]] +=
                        wd[(i * ws_shape[1] + j) * ws_shape[2] + k] as f64;
                }
            }
        }
    }
    if let Some(missing) = count.iter().position(|&c| c == 0) {
        return Err(Error::InconsistentWindowSet(format!("slice {missing} not covered")));
    }
    let mut data = Vec::with_capacity(sum.len());
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let idx = [i, j, k];
                let s = sum[(i * shape[1] + j) * shape[2] + k];
                data.push((s / count[idx[axis]] as f64) as f32);
            }
        }
    }
    let mut out = Volume::new(shape, data)?;
    out.meta = ws.windows[0].meta.clone();
    Ok(out)
}
