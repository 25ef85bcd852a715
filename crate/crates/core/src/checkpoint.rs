//! Single-file checkpoints: a JSON header followed by raw little-endian weights.
//!
//! Layout: `b"JOBVSCKP"`, u32 format version, u64 header length, header JSON,
//! then every tensor's f32 data in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatticeConfig, ModelParams};
use crate::nn::ParamStore;
use crate::volume::CohortStats;

const MAGIC: &[u8; 8] = b"JOBVSCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: LatticeConfig,
    stats: Option<CohortStats>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A trained model with the preprocessing statistics it expects and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub stats: Option<CohortStats>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: ModelParams, stats: Option<CohortStats>) -> Self {
        Self {
            model,
            stats,
            meta: serde_json::Value::Null,
        }
    }

    pub fn checksum(&self) -> String {
        self.model.checksum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config.clone(),
            stats: self.stats.clone(),
            meta: self.meta.clone(),
            tensors: self
                .model
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.model.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params.iter() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        header.config.validate()?;
        let mut params = ParamStore::new();
        let mut at = 20 + len;
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let raw = bytes.get(at..at + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            at += 4 * n;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(&format!("non-finite weights in {}", t.name)));
            }
            params.insert(t.name, t.shape, data);
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        // The stored tensors must be exactly those the configuration builds.
        let expected = crate::model::build_model(&header.config, 0)?;
        let names: Vec<(&str, &[usize])> = params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())).collect();
        let want: Vec<(&str, &[usize])> = expected.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())).collect();
        if names != want {
            return Err(bad("tensor layout does not match the stored configuration"));
        }
        Ok(Self {
            model: ModelParams {
                config: header.config,
                params,
            },
            stats: header.stats,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // Write then rename so an interrupted save never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
