//! A small decoder-only transformer trained from scratch.
//!
//! Pre-norm residual blocks, learned absolute position embeddings, GELU MLP,
//! untied output head. Everything is hand-written over flat parameter
//! buffers; the same code runs in `f32` for training and in `f64` for
//! gradient checks.
//!
//! Sequences are scored with an implicit start token (`ModelConfig::bos_token`)
//! so the first token of an example also gets a prediction.

mod checkpoint;
mod decode;
pub mod ops;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenId;

pub use checkpoint::{file_fingerprint, Checkpoint, OptimizerState, CHECKPOINT_VERSION};
pub use decode::{generate, DecodeConfig, DecodeMethod, Generation, StopReason};
pub use train::{train, AdamW, LogEntry, TrainConfig, TrainOutcome};
pub use transformer::{Layout, ParamInfo, Session, Transformer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of {len} positions exceeds max_seq_len {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error("prefix of {len} tokens leaves no room in a context of {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("non-finite loss {loss} at step {step}: {detail}")]
    NonFiniteLoss { step: usize, loss: f64, detail: String },
    #[error("vocab fingerprint mismatch: expected {expected}, got {actual}")]
    FingerprintMismatch { expected: String, actual: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub init_seed: u64,
    /// Start-of-sequence id fed before the first token.
    pub bos_token: TokenId,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head, and width counts must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_seq_len == 0 || self.vocab_size == 0 {
            return bad("max_seq_len and vocab_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.bos_token as usize >= self.vocab_size {
            return bad("bos_token outside vocabulary");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Anything that assigns next-token distributions to token sequences.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;

    /// Longest sequence [`CausalLm::score`] accepts.
    fn max_seq_len(&self) -> usize;

    /// `log p(tokens[t] | tokens[..t])` for every position.
    fn score(&self, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError>;

    /// Start an incremental decoding session with an empty context.
    fn session(&self) -> Box<dyn LmSession + '_>;
}

pub trait LmSession {
    /// Log-probabilities of the next token given everything pushed so far.
    fn next_log_probs(&self) -> &[f32];

    fn push(&mut self, token: TokenId) -> Result<(), ModelError>;

    /// Tokens pushed so far.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
