//! Raw volume format: one UTF-8 JSON header line
//! `{"shape":[H,W,D],"meta":{...}}\n` followed by `H*W*D` little-endian f32
//! voxels in storage order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{nifti, Volume};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    shape: [usize; 3],
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Loads a raw volume, or a NIfTI-1 file when the path ends in `.nii`.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "nii") {
        return nifti::parse_nifti(&bytes, path);
    }
    decode_raw(&bytes, path)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = encode_raw(v)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub(crate) fn encode_raw(v: &Volume) -> Result<Vec<u8>> {
    let header = RawHeader {
        shape: v.shape(),
        meta: v.meta.clone(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(v.len() * 4);
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(buf)
}

pub(crate) fn decode_raw(bytes: &[u8], path: &Path) -> Result<Volume> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: RawHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path, format!("malformed header: {e}")))?;
    let n: usize = header.shape.iter().product();
    let body = &bytes[nl + 1..];
    if n == 0 || body.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("shape {:?} needs {} bytes, found {}", header.shape, n * 4, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut v = Volume::new(header.shape, data).map_err(|e| Error::format(path, e.to_string()))?;
    v.meta = header.meta;
    Ok(v)
}
