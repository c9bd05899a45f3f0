//! Minimal single-file NIfTI-1 reader (uint8 / int16 / float32, uncompressed).

use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_nifti(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_bits(self.i32(off) as u32)
    }
}

pub(crate) fn parse_nifti(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let mut r = Reader {
        bytes,
        big_endian: false,
    };
    if r.i32(0) != HEADER_SIZE as i32 {
        r.big_endian = true;
        if r.i32(0) != HEADER_SIZE as i32 {
            return Err(Error::format(path, "sizeof_hdr is not 348"));
        }
    }
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "not a single-file NIfTI-1 (magic n+1)"));
    }
    let ndim = r.i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::format(path, format!("unsupported dimensionality {ndim}")));
    }
    let mut shape = [0usize; 3];
    for (a, s) in shape.iter_mut().enumerate() {
        let d = r.i16(42 + 2 * a);
        if d < 1 {
            return Err(Error::format(path, format!("dim[{}] = {d}", a + 1)));
        }
        *s = d as usize;
    }
    for a in 3..ndim as usize {
        if r.i16(42 + 2 * a) > 1 {
            return Err(Error::format(path, "only single-volume images are supported"));
        }
    }
    let datatype = r.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::format(path, format!("unsupported datatype {other}"))),
    };
    let offset = r.f32(108);
    if !(offset >= HEADER_SIZE as f32) {
        return Err(Error::format(path, format!("vox_offset {offset}")));
    }
    let offset = offset as usize;
    let n: usize = shape.iter().product();
    if bytes.len() < offset + n * width {
        return Err(Error::format(
            path,
            format!("need {} data bytes, found {}", n * width, bytes.len().saturating_sub(offset)),
        ));
    }
    let slope = r.f32(112);
    let inter = r.f32(116);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    };
    let value = |idx: usize| -> f32 {
        let off = offset + idx * width;
        match datatype {
            DT_UINT8 => bytes[off] as f32,
            DT_INT16 => r.i16(off) as f32,
            _ => r.f32(off),
        }
    };
    let [nx, ny, _] = shape;
    // NIfTI stores x fastest; storage here is depth (z) fastest.
    let v = Volume::from_fn(shape, |i, j, k| value(i + nx * (j + ny * k)) * slope + inter)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(v)
}
