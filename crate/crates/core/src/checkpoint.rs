//! Checkpoint files: `ELNCKPT1`, a little-endian `u64` header length, a
//! JSON header, then every tensor as raw little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use eln_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::IoContext;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ELNCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: String,
    pub iteration: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Free-form scalars, e.g. optimizer step counts.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub iteration: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub extra: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    /// Tensors whose path starts with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (k, v) in &self.tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                store.insert(rest.to_string(), v.clone());
            }
        }
        store
    }

    pub fn insert_group(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (k, v) in store.iter() {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for (k, v) in &self.tensors {
            entries.insert(k.clone(), TensorEntry { shape: v.shape().to_vec(), offset });
            offset += v.len();
        }
        let header = CheckpointHeader {
            stage: self.stage.clone(),
            iteration: self.iteration,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.tensors.values() {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let payload = &bytes[16 + len..];
        if !payload.len().is_multiple_of(4) {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut tensors = BTreeMap::new();
        for (k, e) in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {k} runs past the payload")))?;
            tensors.insert(k, Tensor::from_vec(&e.shape, data.to_vec())?);
        }
        Ok(Self {
            stage: header.stage,
            iteration: header.iteration,
            config: header.config,
            config_hash: header.config_hash,
            extra: header.extra,
            tensors,
        })
    }

    /// Writes through a temporary file and renames, so a crash never leaves
    /// a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(&bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
        fs::rename(&tmp, path).at(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes)
    }
}
