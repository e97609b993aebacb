//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `GLCN`, `u32` version, `u32` metadata length,
//! metadata as UTF-8 JSON, then one record per tensor: `u32` name length,
//! name bytes, `u32` rank, `rank` x `u32` dims, raw `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::NamedTensor;

pub const MAGIC: &[u8; 4] = b"GLCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("checkpoint metadata is invalid: {0}")]
    Metadata(String),
    #[error("shape mismatch at tensor {tensor}: expected {expected}, found {found}")]
    ShapeMismatch {
        tensor: String,
        expected: String,
        found: String,
    },
    #[error("checkpoint holds a {found} network, expected {expected}")]
    KindMismatch { expected: String, found: String },
    #[error("checkpoint i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Provenance of the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub best_val_auc: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `local`, `context` or `agg`.
    pub kind: String,
    /// Network hyperparameters as JSON; interpreted by the owning network.
    pub network: serde_json::Value,
    pub class_order: Vec<String>,
    pub uninitialized_norms: Vec<String>,
    pub training: TrainingMeta,
    pub tensor_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        meta.tensor_count = self.tensors.len();
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(len, "metadata")?).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let mut tensors = Vec::with_capacity(meta.tensor_count);
        for i in 0..meta.tensor_count {
            let ctx = format!("tensor record {i}");
            let n = r.u32(&ctx)? as usize;
            let name = String::from_utf8(r.take(n, &ctx)?.to_vec())
                .map_err(|_| CheckpointError::Metadata(format!("{ctx}: name is not UTF-8")))?;
            let rank = r.u32(&ctx)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&ctx)? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| CheckpointError::Truncated(ctx.clone()))?, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Metadata(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.meta.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::KindMismatch {
                expected: kind.into(),
                found: self.meta.kind.clone(),
            })
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
