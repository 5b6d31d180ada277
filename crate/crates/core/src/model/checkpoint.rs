//! Binary container of named `f32` tensors.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes   "AAGCKPT\0"
//! version  u32 LE
//! length   u64 LE    byte length of the manifest
//! manifest JSON      {"encoder": …, "tensors": [{"name", "shape", "offset"}], "metadata": …}
//! data     f32 LE    tensors back to back; offsets count floats from the start of this section
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderState};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AAGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    encoder: Option<EncoderConfig>,
    tensors: Vec<Entry>,
    metadata: serde_json::Value,
}

/// Named tensors plus an optional encoder config and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Option<EncoderConfig>,
    pub tensors: Vec<NamedTensor>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_encoder<T: Scalar>(state: &EncoderState<T>, metadata: serde_json::Value) -> Self {
        let tensors = state
            .names()
            .iter()
            .zip(state.params())
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                tensor: t.cast(),
            })
            .collect();
        Checkpoint {
            encoder: Some(state.config().clone()),
            tensors,
            metadata,
        }
    }

    pub fn encoder_state<T: Scalar>(&self) -> Result<EncoderState<T>> {
        let config = self
            .encoder
            .clone()
            .ok_or_else(|| Error::State("checkpoint holds no encoder config".into()))?;
        let named = self
            .tensors
            .iter()
            .map(|nt| (nt.name.clone(), nt.tensor.cast()))
            .collect();
        EncoderState::from_parts(config, named)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|nt| {
                let e = Entry {
                    name: nt.name.clone(),
                    shape: nt.tensor.shape().to_vec(),
                    offset,
                };
                offset += nt.tensor.len();
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            encoder: self.encoder.clone(),
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(20 + manifest.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for nt in &self.tensors {
            for v in nt.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |offset: usize, reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt(0, "missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(8, format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(12, format!("manifest length {len} exceeds file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| corrupt(20, format!("bad manifest: {e}")))?;
        let data = &bytes[data_start..];
        if data.len() % 4 != 0 {
            return Err(corrupt(data_start, "data section is not whole f32s".into()));
        }
        let floats: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let slice = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| corrupt(data_start + 4 * e.offset, format!("tensor {} out of range", e.name)))?;
            tensors.push(NamedTensor {
                tensor: Tensor::new(e.shape, slice.to_vec())?,
                name: e.name,
            });
        }
        Ok(Checkpoint {
            encoder: manifest.encoder,
            tensors,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, 0, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, 0, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
