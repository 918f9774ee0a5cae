//! Versioned parameter container.
//!
//! Layout: the magic `SEMAILCK`, a little-endian `u32` version, a UTF-8
//! metadata block (`u32` length then bytes, usually the experiment config in
//! `key = value` form), a `u32` tensor count, then per tensor a `u32` name
//! length, the name bytes and a shape-prefixed `f32` array.

use std::collections::HashSet;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::episode::{write_array, Cursor};
use crate::error::{Error, Result};
use crate::nn::Bundle;

pub const MAGIC: &[u8; 8] = b"SEMAILCK";
pub const VERSION: u32 = 1;

const MAX_RANK: usize = 8;
const MAX_NAME: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<NamedArray>,
}

impl Checkpoint {
    /// Snapshots every variable of `bundles` as `f32`.
    pub fn capture<'a>(meta: impl Into<String>, bundles: impl IntoIterator<Item = &'a Bundle>) -> Result<Self> {
        let mut tensors = Vec::new();
        for bundle in bundles {
            for (name, var) in bundle.named() {
                let t = var.as_tensor().to_dtype(DType::F32)?;
                tensors.push(NamedArray {
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                    data: t.flatten_all()?.to_vec1::<f32>()?,
                });
            }
        }
        Ok(Self {
            meta: meta.into(),
            tensors,
        })
    }

    /// Writes stored values into the matching variables of `bundles`.
    /// Every variable must be present with an identical shape; unknown
    /// entries are rejected too.
    pub fn restore<'a>(&self, bundles: impl IntoIterator<Item = &'a Bundle>) -> Result<()> {
        let mut used = HashSet::new();
        for bundle in bundles {
            for (name, var) in bundle.named() {
                let entry = self
                    .tensors
                    .iter()
                    .find(|t| &t.name == name)
                    .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
                if entry.shape != var.dims() {
                    return Err(Error::format(
                        "checkpoint",
                        format!("{name}: stored shape {:?}, model expects {:?}", entry.shape, var.dims()),
                    ));
                }
                let value =
                    Tensor::from_slice(&entry.data, entry.shape.as_slice(), var.device())?.to_dtype(var.dtype())?;
                var.set(&value)?;
                used.insert(name.as_str());
            }
        }
        if let Some(extra) = self.tensors.iter().find(|t| !used.contains(t.name.as_str())) {
            return Err(Error::format("checkpoint", format!("unexpected tensor {}", extra.name)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            write_array(&mut out, &t.shape, t.data.iter().copied());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::format("checkpoint", "truncated");
        let mut cur = Cursor::new(bytes);
        if cur.take(MAGIC.len()) != Some(MAGIC.as_slice()) {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = cur.u32().ok_or_else(truncated)?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let meta_len = cur.u32().ok_or_else(truncated)? as usize;
        let meta = cur.take(meta_len).ok_or_else(truncated)?;
        let meta = std::str::from_utf8(meta)
            .map_err(|_| Error::format("checkpoint", "metadata is not UTF-8"))?
            .to_string();
        let count = cur.u32().ok_or_else(truncated)? as usize;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = cur.u32().ok_or_else(truncated)? as usize;
            if name_len > MAX_NAME {
                return Err(Error::format("checkpoint", "tensor name too long"));
            }
            let name = std::str::from_utf8(cur.take(name_len).ok_or_else(truncated)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::format("checkpoint", format!("duplicate tensor {name}")));
            }
            let array = cur.array("checkpoint tensor", MAX_RANK)?;
            tensors.push(NamedArray {
                name,
                shape: array.shape,
                data: array.data,
            });
        }
        if !cur.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
