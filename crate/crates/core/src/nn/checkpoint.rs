//! Single-file parameter container.
//!
//! Layout: the 8-byte magic `DBGCCKPT`, the manifest length as a
//! little-endian `u64`, the JSON manifest, then one little-endian `f64`
//! blob per parameter in manifest order (row-major).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DBGCCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blobs: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture<P: Parameters, C: Serialize>(kind: &str, config: &C, seed: u64, params: &P) -> Result<Self> {
        let named = params.named();
        let manifest = Manifest {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            params: named
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                })
                .collect(),
        };
        let blobs = named.iter().map(|(_, t)| t.iter().copied().collect()).collect();
        Ok(Self { manifest, blobs })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + manifest.len() + 8 * self.blobs.iter().map(Vec::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for blob in &self.blobs {
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::CorruptData("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::CorruptData("truncated checkpoint manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let mut rest = &bytes[16 + len..];
        let mut blobs = Vec::with_capacity(manifest.params.len());
        for entry in &manifest.params {
            let n = entry.shape[0] * entry.shape[1];
            if rest.len() < n * 8 {
                return Err(Error::CorruptData(format!("truncated blob {}", entry.name)));
            }
            let (blob, tail) = rest.split_at(n * 8);
            blobs.push(
                blob.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            );
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(Error::CorruptData("trailing bytes after checkpoint".into()));
        }
        Ok(Self { manifest, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies the stored tables into `params`, which must have the same
    /// names and shapes in the same order.
    pub fn restore<P: Parameters>(&self, params: &mut P) -> Result<()> {
        let expected: Vec<ParamEntry> = params
            .named()
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect();
        if expected != self.manifest.params {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint layout does not match a {} model",
                self.manifest.kind
            )));
        }
        for (t, blob) in params.tensors_mut().into_iter().zip(&self.blobs) {
            for (dst, src) in t.iter_mut().zip(blob) {
                *dst = *src;
            }
        }
        params.ensure_finite()
    }

    pub fn config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.manifest.config.clone())?)
    }
}
