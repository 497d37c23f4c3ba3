//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `CUPECKPT` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `h` (`u64`) |
//! | h | UTF-8 JSON header |
//! | rest | `f64` payload, tensors back to back in header order |
//!
//! The header records the model config, step, free-form metadata and, for
//! every tensor, its name, shape, role and element offset into the payload.
//! Tensors are sorted by name so equal states serialize to equal bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{EncoderState, ModelConfig, CLASSIFIER_PREFIX, PROJECTION_PREFIX, SSL_PREFIX};
use crate::nn::params::{ParamGroup, ParamKind};
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CUPECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    /// Optimizer moments, codebook state and other training state.
    State,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub role: TensorRole,
    pub group: Option<ParamGroup>,
    pub value: Tensor,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    role: TensorRole,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    group: Option<ParamGroup>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    /// Training config snapshot and other provenance.
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sorted: Vec<&NamedTensor> = self.tensors.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut offset = 0;
        let mut entries = Vec::with_capacity(sorted.len());
        for t in &sorted {
            if !t.value.is_finite() {
                return Err(Error::NonFinite(format!("tensor {} in checkpoint", t.name)));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.value.shape().to_vec(),
                role: t.role,
                group: t.group,
                offset,
            });
            offset += t.value.len();
        }
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in sorted {
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds payload", e.name)))?
                .to_vec();
            tensors.push(NamedTensor {
                name: e.name,
                role: e.role,
                group: e.group,
                value: Tensor::new(&e.shape, data)?,
            });
        }
        Ok(Self {
            model: header.model,
            step: header.step,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensors with the given role.
    pub fn with_role(&self, role: TensorRole) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter().filter(move |t| t.role == role)
    }

    /// Number of trainable parameter values.
    pub fn param_count(&self) -> usize {
        self.with_role(TensorRole::Param).map(|t| t.value.len()).sum()
    }
}

impl EncoderState {
    /// Parameters and buffers as checkpoint tensors, plus any extra state.
    pub fn to_checkpoint(&self, step: u64, meta: serde_json::Value, state: Vec<NamedTensor>) -> Checkpoint {
        let mut tensors: Vec<NamedTensor> = self
            .store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                role: match p.kind {
                    ParamKind::Trainable => TensorRole::Param,
                    ParamKind::Buffer => TensorRole::Buffer,
                },
                group: Some(p.group),
                value: p.value.clone(),
            })
            .collect();
        tensors.extend(state);
        Checkpoint {
            model: self.config.clone(),
            step,
            meta,
            tensors,
        }
    }

    /// Rebuild a model from a checkpoint. Heads are attached when the
    /// checkpoint holds their parameters; every parameter must match.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut state = EncoderState::build(ck.model.clone(), 0)?;
        let has = |prefix: &str| ck.tensors.iter().any(|t| t.name.starts_with(prefix));
        if !has(CLASSIFIER_PREFIX) {
            state.drop_classifier();
        }
        if has(PROJECTION_PREFIX) || has(SSL_PREFIX) {
            state.attach_pretraining(0)?;
            if !has(PROJECTION_PREFIX) {
                state.drop_pretraining_head();
            }
            if !has(SSL_PREFIX) {
                state.drop_ssl_components();
            }
        }
        let mut seen = 0;
        for t in ck.tensors.iter().filter(|t| t.role != TensorRole::State) {
            let id = state
                .store
                .find(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", t.name)))?;
            let p = state.store.get_mut(id);
            if p.value.shape() != t.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    t.name,
                    t.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.value.clone();
            seen += 1;
        }
        let expected = state.store.iter().count();
        if seen != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of the model's {expected} tensors"
            )));
        }
        Ok(state)
    }
}
