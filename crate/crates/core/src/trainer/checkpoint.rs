//! Adapter checkpoints: one JSON header line, then little-endian `f64` payloads.
//!
//! The payload holds the four matrices in slot order, followed by the first
//! and second optimizer moments (again in slot order) when `optimizer` is set.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adapter::{ProjectionAdapter, Slot};
use super::optim::AdamState;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "MICLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    dim: usize,
    frozen: [bool; 4],
    cfg_hash: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    optimizer: bool,
    #[serde(default)]
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub adapter: ProjectionAdapter,
    pub optimizer: Option<AdamState>,
    pub cfg_hash: String,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(adapter: ProjectionAdapter, cfg_hash: impl Into<String>) -> Self {
        Self {
            adapter,
            optimizer: None,
            cfg_hash: cfg_hash.into(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = self.adapter.dim();
        let header = Header {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            dim,
            frozen: self.adapter.frozen_flags(),
            cfg_hash: self.cfg_hash.clone(),
            metadata: self.metadata.clone(),
            optimizer: self.optimizer.is_some(),
            step: self.optimizer.as_ref().map_or(0, |s| s.step),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::parse("checkpoint header", e))?;
        out.push(b'\n');
        let mut put = |values: &[f64]| values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for slot in Slot::ALL {
            put(self.adapter.matrix(slot));
        }
        if let Some(state) = &self.optimizer {
            state.m.iter().chain(&state.v).for_each(|s| put(s));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing header line".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        if header.magic != CHECKPOINT_MAGIC {
            return Err(corrupt(format!("bad magic {:?}", header.magic)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {}", header.version)));
        }
        let block = header.dim * header.dim;
        let blocks = if header.optimizer { 12 } else { 4 };
        let payload = &bytes[nl + 1..];
        if payload.len() != blocks * block * 8 {
            return Err(corrupt(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                blocks * block * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = || -> Vec<f64> { values.by_ref().take(block).collect() };
        let weights = [take(), take(), take(), take()];
        let optimizer = header.optimizer.then(|| AdamState {
            step: header.step,
            m: [take(), take(), take(), take()],
            v: [take(), take(), take(), take()],
        });
        let adapter = ProjectionAdapter::from_parts(header.dim, weights, header.frozen)
            .map_err(|e| corrupt(e.to_string()))?;
        Ok(Self {
            adapter,
            optimizer,
            cfg_hash: header.cfg_hash,
            metadata: header.metadata,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
