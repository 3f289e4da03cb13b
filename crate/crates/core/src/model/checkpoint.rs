//! Checkpoint container.
//!
//! Layout: `ILMCKPT\0`, u32 version, u64 header length, JSON header, then
//! little-endian f32 parameters in header order, then (when present) the
//! optimizer's first and second moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, ParamInfo, Transformer};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ILMCKPT\0";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_fingerprint: String,
    /// Optimizer steps taken when this was written.
    pub step: u64,
    pub params: Vec<f32>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocab_fingerprint: String,
    step: u64,
    tensors: Vec<ParamInfo>,
    optimizer_step: Option<u64>,
}

fn corrupt(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

/// Hex sha256 of a file's bytes.
pub fn file_fingerprint(path: &Path) -> Result<String, ModelError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl Checkpoint {
    pub fn from_model(model: &Transformer<f32>, vocab_fingerprint: &str, step: u64) -> Self {
        Self {
            config: model.config().clone(),
            vocab_fingerprint: vocab_fingerprint.to_string(),
            step,
            params: model.params().to_vec(),
            optimizer: None,
        }
    }

    pub fn to_model(&self) -> Result<Transformer<f32>, ModelError> {
        Transformer::from_params(self.config.clone(), self.params.clone())
    }

    pub fn verify_vocab(&self, fingerprint: &str) -> Result<(), ModelError> {
        if self.vocab_fingerprint != fingerprint {
            return Err(ModelError::FingerprintMismatch {
                expected: self.vocab_fingerprint.clone(),
                actual: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = super::Layout::new(&self.config).tensors().to_vec();
        let header = Header {
            config: self.config.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            step: self.step,
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut n = self.params.len();
        if let Some(o) = &self.optimizer {
            n += o.m.len() + o.v.len();
        }
        let mut out = Vec::with_capacity(20 + json.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(&self.params);
        if let Some(o) = &self.optimizer {
            put(&o.m);
            put(&o.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..body_start]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        header.config.validate()?;
        let layout = super::Layout::new(&header.config);
        if header.tensors != layout.tensors() {
            return Err(corrupt("tensor table does not match config"));
        }
        let n = layout.total();
        let blocks = if header.optimizer_step.is_some() { 3 } else { 1 };
        let body = &bytes[body_start..];
        if body.len() != 4 * n * blocks {
            return Err(corrupt(format!("expected {} payload bytes, found {}", 4 * n * blocks, body.len())));
        }
        let floats: Vec<f32> =
            body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut it = floats.chunks_exact(n.max(1)).map(<[f32]>::to_vec);
        let params = if n == 0 { Vec::new() } else { it.next().unwrap_or_default() };
        let optimizer = header.optimizer_step.map(|step| OptimizerState {
            step,
            m: it.next().unwrap_or_default(),
            v: it.next().unwrap_or_default(),
        });
        Ok(Self { config: header.config, vocab_fingerprint: header.vocab_fingerprint, step: header.step, params, optimizer })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
