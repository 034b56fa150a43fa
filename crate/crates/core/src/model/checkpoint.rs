//! Checkpoint container: magic, little-endian header length, JSON header with
//! the model config, its hash and a tensor table, then raw f64 data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::VerifierModel;
use crate::error::{invalid, Error, Result};
use crate::hashing::config_hash;

const MAGIC: &[u8; 8] = b"RVCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fold: Option<usize>,
    pub held_out_specimen: Option<String>,
    pub train_specimens: Vec<String>,
    /// Sample uids the model was fitted on (before oversampling).
    pub train_sample_ids: Vec<String>,
    /// Sample uids reserved for conformal calibration.
    pub calibration_sample_ids: Vec<String>,
    pub dataset_config_hash: Option<String>,
    pub train_config_hash: Option<String>,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    config_hash: String,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VerifierModel,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut offset = 0;
        self.model.visit_state(&mut |name, v| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                len: v.len(),
                offset,
            });
            offset += v.len();
            for x in v {
                data.extend_from_slice(&x.to_le_bytes());
            }
        });
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            config_hash: config_hash(&self.model.config),
            meta: self.meta.clone(),
            tensors,
        };
        let hbytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + hbytes.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&hbytes);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(invalid("not a verifier checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| invalid("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        if config_hash(&header.config) != header.config_hash {
            return Err(invalid("checkpoint config hash mismatch"));
        }
        let data = &bytes[hend..];
        let mut model = VerifierModel::new(header.config, 0)?;
        let mut idx = 0;
        let mut err: Option<Error> = None;
        model.visit_state_mut(&mut |name, v| {
            if err.is_some() {
                return;
            }
            let Some(entry) = header.tensors.get(idx) else {
                err = Some(invalid(format!("checkpoint lacks tensor {name}")));
                return;
            };
            idx += 1;
            if entry.name != name || entry.len != v.len() {
                err = Some(invalid(format!(
                    "tensor {} ({} values) does not match {name} ({} values)",
                    entry.name,
                    entry.len,
                    v.len()
                )));
                return;
            }
            let start = entry.offset * 8;
            let Some(raw) = data.get(start..start + entry.len * 8) else {
                err = Some(invalid(format!("tensor {name} truncated")));
                return;
            };
            for (dst, c) in v.iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(c.try_into().unwrap());
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != header.tensors.len() {
            return Err(invalid("checkpoint has extra tensors"));
        }
        Ok(Self {
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
