//! The experiment stages, each reading and writing files under one output
//! directory:
//!
//! ```text
//! corpus/{train,valid,test}.jsonl         ingest
//! vocab.json                              train-vocab
//! examples/{train,valid}/{strategy}.bin   make-examples (+ .manifest.json)
//! models/{strategy}/checkpoint.bin        train
//! models/{strategy}/train_log.jsonl       train
//! eval/report.{json,txt}                  eval
//! ```
//!
//! A stage depends only on the config and on files written by earlier
//! stages, so deleting the directory and re-running reproduces it.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, CorpusSource, RunConfig};
use crate::corpus::{load_corpus_vec, to_jsonl, CorpusError, CorpusFormat, Document, LoadOptions};
use crate::eval::{doc_stream, evaluate, EvalError, EvalReport};
use crate::examples::{
    build_all, read_dataset, unmasked_lmall_len, write_dataset, BuildOptions, EncodedPair, ExampleError, InfillExample,
    Strategy,
};
use crate::masker::sample_mask;
use crate::model::{train, Checkpoint, LogEntry, ModelError, TrainOutcome, Transformer};
use crate::synth;
use crate::tokenizer::{train_vocab, Special, TokenizerError, Vocab, VocabReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: missing artifact {}; run the earlier stages first", path.display())]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("duplicate document id {id:?} in the {split} split")]
    DuplicateId { split: Split, id: String },
    #[error("the {split} split has no usable documents")]
    EmptySplit { split: Split },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Example(#[from] ExampleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Short machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(ConfigError::Invalid { .. }) => "config_invalid",
            PipelineError::Config(ConfigError::Io { .. }) => "config_unreadable",
            PipelineError::MissingArtifact { .. } => "missing_artifact",
            PipelineError::Io { .. } => "io",
            PipelineError::DuplicateId { .. } => "duplicate_id",
            PipelineError::EmptySplit { .. } => "empty_split",
            PipelineError::Corpus(_) => "corpus",
            PipelineError::Tokenizer(_) => "tokenizer",
            PipelineError::Example(_) => "examples",
            PipelineError::Model(_) => "model",
            PipelineError::Eval(_) => "eval",
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Artifact locations under an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self, split: Split) -> PathBuf {
        self.root.join("corpus").join(format!("{split}.jsonl"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn dataset(&self, split: Split, strategy: Strategy) -> PathBuf {
        self.root.join("examples").join(split.as_str()).join(format!("{}.bin", strategy.as_str().to_lowercase()))
    }

    pub fn model_dir(&self, strategy: Strategy) -> PathBuf {
        self.root.join("models").join(strategy.as_str().to_lowercase())
    }

    pub fn checkpoint(&self, strategy: Strategy) -> PathBuf {
        self.model_dir(strategy).join("checkpoint.bin")
    }

    pub fn train_log(&self, strategy: Strategy) -> PathBuf {
        self.model_dir(strategy).join("train_log.jsonl")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("eval").join("report.txt")
    }
}

fn require(stage: &'static str, path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { stage, path })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => fs::create_dir_all(dir).map_err(io_err(dir)),
        None => Ok(()),
    }
}

pub fn load_split(out: &Artifacts, stage: &'static str, split: Split) -> Result<Vec<Document>> {
    let path = require(stage, out.corpus(split))?;
    Ok(load_corpus_vec(&path, CorpusFormat::Jsonl, LoadOptions::default())?)
}

pub fn load_vocab(out: &Artifacts, stage: &'static str) -> Result<Vocab> {
    Ok(Vocab::load(&require(stage, out.vocab())?)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

fn split_synthetic(docs: Vec<Document>, fractions: [f64; 3]) -> [Vec<Document>; 3] {
    let n = docs.len();
    let n_train = ((n as f64 * fractions[0]).round() as usize).clamp(1, n - 2);
    let n_valid = ((n as f64 * fractions[1]).round() as usize).clamp(1, n - n_train - 1);
    let mut rest = docs;
    let mut valid = rest.split_off(n_train);
    let test = valid.split_off(n_valid);
    [rest, valid, test]
}

/// Load or generate the corpus and write the three splits.
pub fn ingest(cfg: &RunConfig, out: &Artifacts) -> Result<IngestSummary> {
    let splits: [Vec<Document>; 3] = match &cfg.corpus {
        CorpusSource::Synthetic { n_docs, generator_seed, split } => {
            split_synthetic(synth::corpus(*n_docs, *generator_seed)?, *split)
        }
        CorpusSource::Files { format, has_meta, train, valid, test } => {
            let opts = LoadOptions { has_meta: *has_meta };
            let load = |split: Split, path: &Path| -> Result<Vec<Document>> {
                let path = require("ingest", path.to_path_buf())?;
                let mut docs = load_corpus_vec(&path, *format, opts)?;
                for d in &mut docs {
                    d.id = format!("{split}:{}", d.id);
                }
                Ok(docs)
            };
            [load(Split::Train, train)?, load(Split::Valid, valid)?, load(Split::Test, test)?]
        }
    };
    for (split, docs) in Split::ALL.into_iter().zip(&splits) {
        if docs.is_empty() {
            return Err(PipelineError::EmptySplit { split });
        }
        let mut seen = BTreeSet::new();
        if let Some(d) = docs.iter().find(|d| !seen.insert(d.id.as_str())) {
            return Err(PipelineError::DuplicateId { split, id: d.id.clone() });
        }
        write_file(&out.corpus(split), to_jsonl(docs).as_bytes())?;
    }
    Ok(IngestSummary { train: splits[0].len(), valid: splits[1].len(), test: splits[2].len() })
}

/// Learn the subword vocabulary from the training split.
pub fn train_vocab_stage(cfg: &RunConfig, out: &Artifacts) -> Result<VocabReport> {
    let docs = load_split(out, "train-vocab", Split::Train)?;
    let report = train_vocab(docs.iter().map(|d| d.raw.as_str()), cfg.vocab.target_size)?;
    create_parent(&out.vocab())?;
    report.vocab.save(&out.vocab())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitExamples {
    pub split: Split,
    /// Documents whose unmasked encoding cannot fit the model.
    pub dropped_documents: usize,
    /// Masks whose encoding overflowed for some strategy.
    pub dropped_masks: usize,
    /// Examples per strategy; every strategy gets the same (document, mask) pairs.
    pub examples: usize,
}

/// Random stream of mask `copy` of a document.
pub fn mask_stream(doc: &Document, copy: u64) -> u64 {
    doc_stream(doc).wrapping_add(copy)
}

/// Masked examples for every strategy, built from identical (document,
/// mask) pairs and dropped together when any strategy overflows.
pub fn build_examples(cfg: &RunConfig, vocab: &Vocab, docs: &[Document]) -> Result<([Vec<InfillExample>; 4], usize, usize)> {
    let policy = cfg.mask_policy();
    let opts = BuildOptions { max_seq_len: cfg.model.max_seq_len, loss_scope: cfg.train.loss_scope };
    let mut sets: [Vec<InfillExample>; 4] = Default::default();
    let (mut dropped_docs, mut dropped_masks) = (0, 0);
    for doc in docs {
        if unmasked_lmall_len(&doc.raw, vocab)? > cfg.model.max_seq_len {
            dropped_docs += 1;
            continue;
        }
        for copy in 0..cfg.examples.masks_per_doc as u64 {
            let masked = sample_mask(doc, &policy, &mut policy.rng_for(mask_stream(doc, copy)));
            let pair = EncodedPair::new(&masked, vocab)?;
            match build_all(&pair, vocab, &opts) {
                Ok(all) => {
                    for (set, ex) in sets.iter_mut().zip(all) {
                        set.push(ex);
                    }
                }
                Err(ExampleError::SequenceTooLong { .. }) => dropped_masks += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok((sets, dropped_docs, dropped_masks))
}

/// Write training and validation datasets for the given strategies.
pub fn make_examples(cfg: &RunConfig, out: &Artifacts, strategies: &[Strategy]) -> Result<Vec<SplitExamples>> {
    let vocab = load_vocab(out, "make-examples")?;
    let mut summary = Vec::new();
    for split in [Split::Train, Split::Valid] {
        let docs = load_split(out, "make-examples", split)?;
        let (sets, dropped_documents, dropped_masks) = build_examples(cfg, &vocab, &docs)?;
        if sets[0].is_empty() {
            return Err(PipelineError::EmptySplit { split });
        }
        for (strategy, set) in Strategy::ALL.into_iter().zip(&sets) {
            if !strategies.contains(&strategy) {
                continue;
            }
            let path = out.dataset(split, strategy);
            create_parent(&path)?;
            write_dataset(set, &path, vocab.fingerprint(), Some(cfg.mask_policy()), cfg.train.loss_scope)?;
        }
        summary.push(SplitExamples { split, dropped_documents, dropped_masks, examples: sets[0].len() });
    }
    Ok(summary)
}

/// Train one model per strategy from scratch, keeping the checkpoint with
/// the best validation perplexity.
pub fn train_stage(
    cfg: &RunConfig,
    out: &Artifacts,
    strategies: &[Strategy],
    mut on_log: impl FnMut(Strategy, &LogEntry),
) -> Result<Vec<(Strategy, TrainOutcome)>> {
    let vocab = load_vocab(out, "train")?;
    let train_cfg = cfg.train_config();
    let mut outcomes = Vec::new();
    for &strategy in strategies {
        let train_set = read_dataset(&require("train", out.dataset(Split::Train, strategy))?, &vocab)?;
        let val_set = read_dataset(&require("train", out.dataset(Split::Valid, strategy))?, &vocab)?;
        let model_cfg = cfg.model.to_model_config(vocab.size(), vocab.special(Special::Eos), cfg.seed);
        let mut model = Transformer::<f32>::new(model_cfg)?;

        let log_path = out.train_log(strategy);
        create_parent(&log_path)?;
        let mut log = Vec::new();
        let outcome = train(&mut model, &train_set, &val_set, &train_cfg, |e| {
            log.push(serde_json::to_string(e).expect("log entry serializes"));
            on_log(strategy, e);
        })?;
        let mut text = log.join("\n");
        text.push('\n');
        write_file(&log_path, text.as_bytes())?;

        let mut ckpt = Checkpoint::from_model(&model, vocab.fingerprint(), outcome.best_step as u64);
        ckpt.optimizer = Some(outcome.optimizer.clone());
        ckpt.save(&out.checkpoint(strategy))?;
        outcomes.push((strategy, outcome));
    }
    Ok(outcomes)
}

/// Load the checkpoint of `strategy`, checking it against `vocab`.
pub fn load_model(out: &Artifacts, stage: &'static str, strategy: Strategy, vocab: &Vocab) -> Result<Transformer<f32>> {
    let ckpt = Checkpoint::load(&require(stage, out.checkpoint(strategy))?)?;
    ckpt.verify_vocab(vocab.fingerprint())?;
    Ok(ckpt.to_model()?)
}

/// Score all four strategies on the test split and write the report.
pub fn eval_stage(cfg: &RunConfig, out: &Artifacts) -> Result<EvalReport> {
    let vocab = load_vocab(out, "eval")?;
    let docs = load_split(out, "eval", Split::Test)?;
    let models = Strategy::ALL
        .into_iter()
        .map(|s| Ok((s, load_model(out, "eval", s, &vocab)?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(Strategy, &dyn crate::model::CausalLm)> = models.iter().map(|(s, m)| (*s, m as _)).collect();
    let report = evaluate(&refs, &docs, &vocab, &cfg.eval.tasks, cfg.seed, &cfg.mask_policy(), &cfg.name)?;
    write_file(&out.report_json(), report.to_json().as_bytes())?;
    write_file(&out.report_txt(), report.to_table().as_bytes())?;
    Ok(report)
}

/// Every stage in order, for all strategies.
pub fn run_all(cfg: &RunConfig, out: &Artifacts, on_log: impl FnMut(Strategy, &LogEntry)) -> Result<EvalReport> {
    ingest(cfg, out)?;
    train_vocab_stage(cfg, out)?;
    make_examples(cfg, out, &Strategy::ALL)?;
    train_stage(cfg, out, &Strategy::ALL, on_log)?;
    eval_stage(cfg, out)
}
