//! The run configuration: one TOML document that governs an experiment.
//!
//! ```toml
//! version = 1
//! name = "toy"      # corpus name shown in reports
//! seed = 0          # master seed for masks, initialization, batching
//!
//! [corpus]
//! kind = "synthetic"          # or "files"
//! n_docs = 500
//! generator_seed = 0
//! split = [0.8, 0.1, 0.1]     # train / valid / test fractions
//!
//! [mask]          # masking policy; its seed comes from `seed`
//! [vocab]         # target_size
//! [examples]      # masks_per_doc
//! [model]         # n_layers, n_heads, d_model, d_ff, max_seq_len, dropout
//! [train]         # optimizer and schedule; its seed comes from `seed`
//! [eval]          # tasks
//! [serve]         # HTTP service settings
//! ```
//!
//! With `kind = "files"` the corpus section instead holds `format`
//! (`jsonl` or `blankline-txt`), `has_meta`, and `train`, `valid`, `test`
//! paths, resolved relative to the config file.
//!
//! Every key not listed in the schema is rejected, and all offending keys
//! are reported together.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusFormat;
use crate::eval::Task;
use crate::examples::DEFAULT_MAX_SEQ_LEN;
use crate::masker::MaskPolicy;
use crate::model::{DecodeConfig, ModelConfig, TrainConfig};
use crate::tokenizer::TokenId;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config ({}): {reason}", keys.join(", "))]
    Invalid { keys: Vec<String>, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ConfigError {
    fn invalid(keys: &[&str], reason: impl Into<String>) -> Self {
        ConfigError::Invalid { keys: keys.iter().map(|k| k.to_string()).collect(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic {
        n_docs: usize,
        #[serde(default)]
        generator_seed: u64,
        #[serde(default = "default_split")]
        split: [f64; 3],
    },
    Files {
        format: CorpusFormat,
        #[serde(default)]
        has_meta: bool,
        train: PathBuf,
        valid: PathBuf,
        test: PathBuf,
    },
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic { n_docs: 500, generator_seed: 0, split: default_split() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    /// Subword budget, not counting the special tokens.
    pub target_size: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { target_size: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExamplesSection {
    /// Independent masks drawn per training document.
    pub masks_per_doc: usize,
}

impl Default for ExamplesSection {
    fn default() -> Self {
        Self { masks_per_doc: 4 }
    }
}

/// Architecture; vocabulary size and start token come from the trained vocab.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 256, max_seq_len: DEFAULT_MAX_SEQ_LEN, dropout: 0.0 }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize, bos_token: TokenId, init_seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size,
            dropout: self.dropout,
            init_seed,
            bos_token,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: Vec<Task>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tasks: Task::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    /// Defaults to the ILM checkpoint under the output directory.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the vocabulary under the output directory.
    pub vocab: Option<PathBuf>,
    pub max_concurrent: usize,
    /// Upper bound on `decode.max_new_tokens` for one request.
    pub max_new_tokens: usize,
    /// Upper bound on the request text, in characters.
    pub max_text_chars: usize,
    /// Value of `Access-Control-Allow-Origin`.
    pub cors_origin: String,
    pub decode: DecodeConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            checkpoint: None,
            vocab: None,
            max_concurrent: 4,
            max_new_tokens: 256,
            max_text_chars: 4000,
            cors_origin: "*".into(),
            decode: DecodeConfig::default(),
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_concurrent == 0 {
            return Err(ConfigError::invalid(&["serve.max_concurrent"], "must be positive"));
        }
        if self.max_new_tokens == 0 {
            return Err(ConfigError::invalid(&["serve.max_new_tokens"], "must be positive"));
        }
        if self.max_text_chars == 0 {
            return Err(ConfigError::invalid(&["serve.max_text_chars"], "must be positive"));
        }
        self.decode.validate().map_err(|e| ConfigError::invalid(&["serve.decode"], e.to_string()))?;
        if self.decode.max_new_tokens > self.max_new_tokens {
            return Err(ConfigError::invalid(&["serve.decode.max_new_tokens"], "exceeds serve.max_new_tokens"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSource,
    #[serde(default)]
    pub mask: MaskPolicy,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub examples: ExamplesSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub serve: ServeConfig,
}

fn default_name() -> String {
    "toy".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            name: default_name(),
            seed: 0,
            corpus: CorpusSource::default(),
            mask: MaskPolicy::default(),
            vocab: VocabSection::default(),
            examples: ExamplesSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            serve: ServeConfig::default(),
        }
    }
}

/// Keys whose values are checked by their own deserializer rather than by
/// the schema walk.
const OPAQUE: &[&str] = &["serve.decode"];

/// Keys owned by the top-level `seed`.
const DERIVED: &[&str] = &["mask.rng_seed", "train.seed"];

/// Every key path the schema accepts for a document of this corpus kind.
fn schema(corpus_kind: &str) -> toml::Table {
    let corpus = match corpus_kind {
        "files" => CorpusSource::Files {
            format: CorpusFormat::Jsonl,
            has_meta: false,
            train: PathBuf::new(),
            valid: PathBuf::new(),
            test: PathBuf::new(),
        },
        _ => CorpusSource::default(),
    };
    let mut full = RunConfig { corpus, ..RunConfig::default() };
    full.serve.checkpoint = Some(PathBuf::new());
    full.serve.vocab = Some(PathBuf::new());
    match toml::Value::try_from(&full).expect("config serializes") {
        toml::Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in given {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        if DERIVED.contains(&path.as_str()) {
            out.push(path);
            continue;
        }
        match known.get(key) {
            None => out.push(path),
            Some(toml::Value::Table(k)) if !OPAQUE.contains(&path.as_str()) => {
                if let toml::Value::Table(g) = value {
                    unknown_keys(g, k, &path, out);
                }
            }
            Some(_) => {}
        }
    }
}

impl RunConfig {
    /// Parse and validate a config document. Relative corpus paths are
    /// resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::invalid(&[], e.to_string()))?;
        let kind = raw
            .get("corpus")
            .and_then(|c| c.get("kind"))
            .and_then(|k| k.as_str())
            .unwrap_or("synthetic");
        let mut unknown = Vec::new();
        unknown_keys(&raw, &schema(kind), "", &mut unknown);
        if !unknown.is_empty() {
            unknown.sort();
            return Err(ConfigError::Invalid { keys: unknown, reason: "unknown keys".into() });
        }
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let span = e.span();
            let key = span.map(|s| key_at(text, s.start)).unwrap_or_default();
            ConfigError::Invalid { keys: vec![key].into_iter().filter(|k| !k.is_empty()).collect(), reason: e.message().to_string() }
        })?;
        if let CorpusSource::Files { train, valid, test, .. } = &mut cfg.corpus {
            for p in [train, valid, test] {
                if p.is_relative() {
                    *p = base_dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Check every section, collecting all offending keys.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad: Vec<(String, String)> = Vec::new();
        let mut flag = |key: &str, reason: String| bad.push((key.to_string(), reason));
        if self.version != CONFIG_VERSION {
            flag("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version));
        }
        if self.name.trim().is_empty() || self.name.contains(char::is_whitespace) {
            flag("name", "must be a non-empty word".into());
        }
        match &self.corpus {
            CorpusSource::Synthetic { n_docs, split, .. } => {
                if *n_docs < 3 {
                    flag("corpus.n_docs", "need at least 3 documents".into());
                }
                if split.iter().any(|&f| !(f > 0.0 && f < 1.0)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    flag("corpus.split", "fractions must lie in (0, 1) and sum to 1".into());
                }
            }
            CorpusSource::Files { .. } => {}
        }
        if let Err(e) = self.mask.validate() {
            flag("mask", e.to_string());
        }
        if self.vocab.target_size < crate::tokenizer::BYTE_VOCAB {
            flag("vocab.target_size", format!("must be at least {}", crate::tokenizer::BYTE_VOCAB));
        }
        if self.examples.masks_per_doc == 0 {
            flag("examples.masks_per_doc", "must be positive".into());
        }
        if let Err(e) = self.model.to_model_config(1, 0, 0).validate() {
            flag("model", e.to_string());
        }
        if let Err(e) = self.train.validate() {
            flag("train", e.to_string());
        }
        if self.eval.tasks.is_empty() {
            flag("eval.tasks", "must name at least one task".into());
        }
        let mut seen = BTreeSet::new();
        if self.eval.tasks.iter().any(|t| !seen.insert(*t)) {
            flag("eval.tasks", "tasks must be distinct".into());
        }
        if let Err(ConfigError::Invalid { keys, reason }) = self.serve.validate() {
            for k in keys {
                flag(&k, reason.clone());
            }
        }
        if bad.is_empty() {
            return Ok(());
        }
        let reason = bad.iter().map(|(k, r)| format!("{k}: {r}")).collect::<Vec<_>>().join("; ");
        Err(ConfigError::Invalid { keys: bad.into_iter().map(|(k, _)| k).collect(), reason })
    }

    /// Mask policy with the run seed applied.
    pub fn mask_policy(&self) -> MaskPolicy {
        MaskPolicy { rng_seed: self.seed, ..self.mask }
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// The document form, without the keys derived from `seed`.
    pub fn to_toml(&self) -> String {
        let mut doc = match toml::Value::try_from(self).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        };
        for path in DERIVED {
            let (section, key) = path.split_once('.').expect("dotted");
            if let Some(toml::Value::Table(t)) = doc.get_mut(section) {
                t.remove(key);
            }
        }
        toml::to_string(&doc).expect("table serializes")
    }
}

/// Dotted key of the table entry that contains byte `offset`, best effort.
fn key_at(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
            table = name.trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
        if pos > offset {
            break;
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}
