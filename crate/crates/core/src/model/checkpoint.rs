//! Self-describing checkpoint container: magic, version, JSON header, then
//! little-endian `f32` arrays in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DSRMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Map<String, serde_json::Value>,
    arrays: Vec<ArrayEntry>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let body: usize = self.arrays.iter().map(|a| a.data.len() * 4).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(&format!("malformed header: {e}")))?;
        let mut pos = hend;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let end = pos + 4 * n;
            if end > bytes.len() {
                return Err(bad(&format!("truncated array {}", entry.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            arrays.push(NamedArray {
                name: entry.name,
                shape: entry.shape,
                data,
            });
        }
        if pos != bytes.len() {
            return Err(bad(&format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes, path)
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::format(path, format!("missing header field {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::format(path, format!("bad header field {key}: {e}")))
    }
}
