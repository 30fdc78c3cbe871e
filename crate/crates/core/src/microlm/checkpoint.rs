//! Checkpoints: model weights plus a content fingerprint and lineage.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! b"RCKPT001"  u64 header_len  header (JSON)  f64 weights…  sha256(all preceding bytes)
//! ```
//!
//! The fingerprint is SHA-256 over the canonical encoding of the config and
//! the weights only, so it does not depend on lineage labels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{MicroLm, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RCKPT001";

/// Where a checkpoint came from: its own label and the fingerprints of every
/// checkpoint it was derived from, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub label: String,
    pub ancestors: Vec<String>,
}

impl Lineage {
    pub fn root(label: impl Into<String>) -> Self {
        Lineage {
            label: label.into(),
            ancestors: Vec::new(),
        }
    }

    pub fn contains(&self, fingerprint: &str) -> bool {
        self.ancestors.iter().any(|a| a == fingerprint)
    }
}

/// Frozen model weights with identity.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    model: MicroLm,
    fingerprint: String,
    lineage: Lineage,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lineage: Lineage,
    fingerprint: String,
    num_weights: u64,
}

/// SHA-256 over the canonical encoding of `(config, weights)`.
pub fn fingerprint(config: &ModelConfig, weights: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(b"rolecraft-model-v1");
    for v in [
        config.vocab_size as u64,
        config.embed_dim as u64,
        config.num_heads as u64,
        config.num_layers as u64,
        config.context_len as u64,
        config.init_seed,
        weights.len() as u64,
    ] {
        h.update(v.to_le_bytes());
    }
    for w in weights {
        h.update(w.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    /// A freshly initialised model.
    pub fn init(config: ModelConfig, label: impl Into<String>) -> Result<Self> {
        Ok(Checkpoint::from_model(MicroLm::new(config)?, Lineage::root(label)))
    }

    pub fn from_model(model: MicroLm, lineage: Lineage) -> Self {
        let fingerprint = fingerprint(model.config(), model.params());
        Checkpoint {
            model,
            fingerprint,
            lineage,
        }
    }

    /// A checkpoint derived from `self` holding `model`.
    pub fn derive(&self, model: MicroLm, label: impl Into<String>) -> Checkpoint {
        let mut ancestors = self.lineage.ancestors.clone();
        ancestors.push(self.fingerprint.clone());
        Checkpoint::from_model(
            model,
            Lineage {
                label: label.into(),
                ancestors,
            },
        )
    }

    pub fn model(&self) -> &MicroLm {
        &self.model
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn weights(&self) -> &[f64] {
        self.model.params()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    pub fn relabel(mut self, label: impl Into<String>) -> Self {
        self.lineage.label = label.into();
        self
    }

    /// Canonical file bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config().clone(),
            lineage: self.lineage.clone(),
            fingerprint: self.fingerprint.clone(),
            num_weights: self.weights().len() as u64,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + 8 + header.len() + self.weights().len() * 8 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for w in self.weights() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |check: &'static str| Error::Integrity {
            path: path.to_path_buf(),
            check,
        };
        if bytes.len() < 8 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(fail("magic"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(fail("file digest"));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(header_len).ok_or_else(|| fail("header length"))?;
        if header_end > body.len() {
            return Err(fail("header length"));
        }
        let header: Header =
            serde_json::from_slice(&body[16..header_end]).map_err(|_| fail("header"))?;
        let raw = &body[header_end..];
        if raw.len() as u64 != header.num_weights * 8 {
            return Err(fail("weight count"));
        }
        let weights: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if fingerprint(&header.config, &weights) != header.fingerprint {
            return Err(fail("fingerprint"));
        }
        let model = MicroLm::from_params(header.config, weights).map_err(|_| fail("config"))?;
        Ok(Checkpoint {
            model,
            fingerprint: header.fingerprint,
            lineage: header.lineage,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
