//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `STFUSECK`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header (architecture, training
//! config, loss history and tensor sizes), then every parameter tensor as
//! little-endian `f64` in [`StreamModel::tensors`] order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, StreamModel};
use crate::patch::Stream;
use crate::train::{EpochStats, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STFUSECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub history: Vec<EpochStats>,
    pub model: StreamModel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: Architecture,
    train: TrainConfig,
    history: Vec<EpochStats>,
    tensor_sizes: Vec<usize>,
}

impl Checkpoint {
    pub fn stream(&self) -> Stream {
        self.model.arch.stream
    }

    /// Rejects a checkpoint trained for the other stream.
    pub fn require_stream(&self, stream: Stream) -> Result<()> {
        if self.stream() != stream {
            return Err(Error::Incompatible(format!(
                "checkpoint is for the {} stream, expected {stream}",
                self.stream()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.model.tensors();
        let header = Header {
            arch: self.model.arch.clone(),
            train: self.train.clone(),
            history: self.history.clone(),
            tensor_sizes: tensors.iter().map(|t| t.len()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("file is truncated".into());
        if bytes.len() < 20 {
            return Err(truncated());
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "format version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20usize.checked_add(len).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut model = StreamModel::new(header.arch)?;
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        if sizes != header.tensor_sizes {
            return Err(Error::Checkpoint("tensor sizes do not match the architecture".into()));
        }
        let mut data = &bytes[20 + len..];
        if data.len() != 8 * sizes.iter().sum::<usize>() {
            return Err(truncated());
        }
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(data[..8].try_into().unwrap());
                data = &data[8..];
            }
        }
        model.memory.validate()?;
        Ok(Self {
            train: header.train,
            history: header.history,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
