//! Checkpoint files: `FPTC`, u32 version, u32 header length, header JSON
//! (config, tensor manifest sorted by name, metadata), then f32 tensor data
//! in manifest order. Integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams};
use crate::numeric::Tensor;

const MAGIC: &[u8; 4] = b"FPTC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    /// Default KL threshold for moving-part masks, calibrated after training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation_threshold: Option<f64>,
    #[serde(default)]
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        self.params.check()?;
        let mut offset = 0u64;
        let tensors = self
            .params
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.params.config.clone(),
            tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.into());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + len])?;
        header.config.validate()?;
        let data = &bytes[12 + len..];
        let mut tensors = BTreeMap::new();
        let mut expected = 0u64;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || data.len() < (e.offset as usize) + 4 * n {
                return Err(bad(&format!("tensor {} out of place", e.name)));
            }
            let start = e.offset as usize;
            let vals = data[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected += 4 * n as u64;
            if tensors
                .insert(e.name.clone(), Tensor::new(e.shape, vals)?)
                .is_some()
            {
                return Err(bad(&format!("duplicate tensor {}", e.name)));
            }
        }
        if data.len() as u64 != expected {
            return Err(bad("trailing bytes"));
        }
        let params = ModelParams {
            config: header.config,
            tensors,
        };
        params.check()?;
        Ok(Self {
            params,
            meta: header.meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
