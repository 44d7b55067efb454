//! Self-describing binary checkpoints: a magic tag, a JSON header and raw
//! little-endian `f64` tensor data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, Phase};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSPLATCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {got:?}, expected {want:?}")]
    Shape { name: String, want: Vec<usize>, got: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub phase: Phase,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form training metadata.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, phase: Phase, seed: u64) -> Self {
        Self {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                config,
                phase,
                seed,
                tensors: Vec::new(),
                extra: serde_json::Value::Null,
            },
            tensors: BTreeMap::new(),
        }
    }

    /// Snapshot of every parameter value in `store`.
    pub fn from_store(config: ModelConfig, phase: Phase, seed: u64, store: &ParamStore) -> Self {
        let mut ck = Self::new(config, phase, seed);
        for id in store.ids() {
            ck.insert(store.name(id), store.value(id).clone());
        }
        ck
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.version = CHECKPOINT_VERSION;
        header.tensors.clear();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            header.tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(CheckpointError::Corrupt("header runs past end of file".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let data = &body[hlen..];
        if data.len() % 8 != 0 {
            return Err(CheckpointError::Corrupt("data section is not whole f64s".into()));
        }
        let n = data.len() / 8;
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let len: usize = e.shape.iter().product();
            if e.offset + len > n {
                return Err(CheckpointError::Corrupt(format!("tensor `{}` runs past end of data", e.name)));
            }
            let vals = data[8 * e.offset..8 * (e.offset + len)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), vals));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        Self::from_bytes(&bytes)
    }
}
