//! Masked-token perplexity across strategies and granularities.
//!
//! Perplexity is aggregated over the whole evaluation set: log-probabilities
//! of every target token are summed before exponentiating. Only tokens of
//! the original spans count; `SEP`, `ANSWER`, blanks, and `EOS` never do.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Document;
use crate::examples::{build_all, relative_length, BuildOptions, EncodedPair, ExampleError, InfillExample, Strategy};
use crate::masker::{candidate_spans, mask_from_spec, sample_mask, Granularity, MaskError, MaskPolicy};
use crate::model::{CausalLm, ModelError};
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no target tokens to score")]
    EmptyTargets,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Example(#[from] ExampleError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// `-log p` of every target token of one example.
pub fn target_nlls(lm: &dyn CausalLm, example: &InfillExample) -> Result<Vec<f64>, EvalError> {
    let logp = lm.score(&example.tokens)?;
    Ok(example.target_positions().map(|i| -logp[i]).collect())
}

/// Corpus-level perplexity over target tokens. Terms are summed in sorted
/// order, so the result does not depend on example order.
pub fn ppl_masked(lm: &dyn CausalLm, examples: &[InfillExample]) -> Result<f64, EvalError> {
    let mut terms = Vec::new();
    for ex in examples {
        terms.extend(target_nlls(lm, ex)?);
    }
    if terms.is_empty() {
        return Err(EvalError::EmptyTargets);
    }
    terms.sort_by(f64::total_cmp);
    Ok((terms.iter().sum::<f64>() / terms.len() as f64).exp())
}

/// Hash of the sorted target-token multiset, equal across strategies that
/// score the same spans.
pub fn target_multiset_hash(examples: &[InfillExample]) -> String {
    let mut toks: Vec<TokenId> = examples.iter().flat_map(|e| e.target_tokens()).collect();
    toks.sort_unstable();
    let mut h = Sha256::new();
    toks.iter().for_each(|t| h.update(t.to_le_bytes()));
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Document,
    Paragraph,
    Sentence,
    Ngram,
    Word,
    Mixture,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::Document, Task::Paragraph, Task::Sentence, Task::Ngram, Task::Word, Task::Mixture];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Document => "document",
            Task::Paragraph => "paragraph",
            Task::Sentence => "sentence",
            Task::Ngram => "ngram",
            Task::Word => "word",
            Task::Mixture => "mixture",
        }
    }

    pub fn granularity(self) -> Option<Granularity> {
        Some(match self {
            Task::Document => Granularity::Document,
            Task::Paragraph => Granularity::Paragraph,
            Task::Sentence => Granularity::Sentence,
            Task::Ngram => Granularity::Ngram,
            Task::Word => Granularity::Word,
            Task::Mixture => return None,
        })
    }

    fn from_granularity(g: Granularity) -> Self {
        match g {
            Granularity::Document => Task::Document,
            Granularity::Paragraph => Task::Paragraph,
            Granularity::Sentence => Task::Sentence,
            Granularity::Ngram => Task::Ngram,
            Granularity::Word => Task::Word,
        }
    }
}

/// Evaluation pairs for one task, all of which fit every strategy.
#[derive(Debug, Clone)]
pub struct TaskPairs {
    pub task: Task,
    pub pairs: Vec<EncodedPair>,
    /// Documents skipped because some encoding overflowed `max_seq_len` or no
    /// span of the granularity exists.
    pub skipped: usize,
}

fn fits_all(pair: &EncodedPair, vocab: &Vocab, max_seq_len: usize) -> Result<bool, ExampleError> {
    match build_all(pair, vocab, &BuildOptions { max_seq_len, ..BuildOptions::default() }) {
        Ok(_) => Ok(true),
        Err(ExampleError::SequenceTooLong { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Random stream for a document, keyed by its id so that masks do not
/// depend on corpus order.
pub fn doc_stream(doc: &Document) -> u64 {
    let h = Sha256::digest(doc.id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// One uniformly chosen span of granularity `g` per document, drawn from the
/// document's own stream of a generator seeded by `seed` and `g`.
pub fn granularity_pairs(
    docs: &[Document],
    vocab: &Vocab,
    g: Granularity,
    seed: u64,
    max_ngram: usize,
    max_seq_len: usize,
) -> Result<TaskPairs, EvalError> {
    let g_index = Granularity::ALL.iter().position(|&x| x == g).unwrap_or(0) as u64;
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for doc in docs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (g_index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(doc_stream(doc));
        let cands = candidate_spans(doc, g, max_ngram);
        if cands.is_empty() {
            skipped += 1;
            continue;
        }
        let span = cands[rng.random_range(0..cands.len())];
        let masked = mask_from_spec(doc, &[(span, g)])?;
        let pair = EncodedPair::new(&masked, vocab)?;
        if fits_all(&pair, vocab, max_seq_len)? {
            pairs.push(pair);
        } else {
            skipped += 1;
        }
    }
    Ok(TaskPairs { task: Task::from_granularity(g), pairs, skipped })
}

/// Masks drawn with the training policy from each document's stream;
/// documents that receive no span are skipped.
pub fn mixture_pairs(docs: &[Document], vocab: &Vocab, policy: &MaskPolicy, max_seq_len: usize) -> Result<TaskPairs, EvalError> {
    policy.validate()?;
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for doc in docs {
        let mut rng = policy.rng_for(doc_stream(doc));
        let masked = sample_mask(doc, policy, &mut rng);
        if masked.k() == 0 {
            skipped += 1;
            continue;
        }
        let pair = EncodedPair::new(&masked, vocab)?;
        if fits_all(&pair, vocab, max_seq_len)? {
            pairs.push(pair);
        } else {
            skipped += 1;
        }
    }
    Ok(TaskPairs { task: Task::Mixture, pairs, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: Task,
    pub strategy: Strategy,
    pub ppl: f64,
    pub target_token_count: usize,
    pub target_hash: String,
    pub mean_relative_length: f64,
    pub n_documents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub rows: Vec<ReportRow>,
}

/// Score one task's pairs under every strategy that has a model.
pub fn evaluate_task(
    models: &[(Strategy, &dyn CausalLm)],
    task: &TaskPairs,
    vocab: &Vocab,
) -> Result<Vec<ReportRow>, EvalError> {
    let max_seq_len = models.iter().map(|(_, m)| m.max_seq_len()).min().unwrap_or(0);
    let opts = BuildOptions { max_seq_len, ..BuildOptions::default() };
    let mut per_strategy: BTreeMap<Strategy, Vec<InfillExample>> = BTreeMap::new();
    let mut rel: BTreeMap<Strategy, Vec<f64>> = BTreeMap::new();
    for pair in &task.pairs {
        for ex in build_all(pair, vocab, &opts)? {
            rel.entry(ex.strategy).or_default().push(relative_length(&ex, pair));
            per_strategy.entry(ex.strategy).or_default().push(ex);
        }
    }
    let mut rows = Vec::new();
    for &(strategy, lm) in models {
        let examples = per_strategy.get(&strategy).map(Vec::as_slice).unwrap_or(&[]);
        let mut lengths = rel.get(&strategy).cloned().unwrap_or_default();
        lengths.sort_by(f64::total_cmp);
        rows.push(ReportRow {
            task: task.task,
            strategy,
            ppl: ppl_masked(lm, examples)?,
            target_token_count: examples.iter().map(|e| e.target_positions().count()).sum(),
            target_hash: target_multiset_hash(examples),
            mean_relative_length: lengths.iter().sum::<f64>() / lengths.len().max(1) as f64,
            n_documents: examples.len(),
        });
    }
    Ok(rows)
}

/// All five single-span granularity tasks.
pub fn granularity_suite(
    models: &[(Strategy, &dyn CausalLm)],
    docs: &[Document],
    vocab: &Vocab,
    seed: u64,
    max_ngram: usize,
    corpus: &str,
) -> Result<EvalReport, EvalError> {
    let max_seq_len = models.iter().map(|(_, m)| m.max_seq_len()).min().unwrap_or(0);
    let mut rows = Vec::new();
    for g in Granularity::ALL {
        let task = granularity_pairs(docs, vocab, g, seed, max_ngram, max_seq_len)?;
        rows.extend(evaluate_task(models, &task, vocab)?);
    }
    Ok(EvalReport { corpus: corpus.to_string(), rows })
}

pub fn mixture_suite(
    models: &[(Strategy, &dyn CausalLm)],
    docs: &[Document],
    vocab: &Vocab,
    policy: &MaskPolicy,
    corpus: &str,
) -> Result<EvalReport, EvalError> {
    let max_seq_len = models.iter().map(|(_, m)| m.max_seq_len()).min().unwrap_or(0);
    let task = mixture_pairs(docs, vocab, policy, max_seq_len)?;
    Ok(EvalReport { corpus: corpus.to_string(), rows: evaluate_task(models, &task, vocab)? })
}

/// The requested tasks, in canonical order. Single-span tasks draw their
/// spans with `seed`; the mixture task uses `policy`.
pub fn evaluate(
    models: &[(Strategy, &dyn CausalLm)],
    docs: &[Document],
    vocab: &Vocab,
    tasks: &[Task],
    seed: u64,
    policy: &MaskPolicy,
    corpus: &str,
) -> Result<EvalReport, EvalError> {
    let max_seq_len = models.iter().map(|(_, m)| m.max_seq_len()).min().unwrap_or(0);
    let mut rows = Vec::new();
    for task in Task::ALL.into_iter().filter(|t| tasks.contains(t)) {
        let pairs = match task.granularity() {
            Some(g) => granularity_pairs(docs, vocab, g, seed, policy.max_ngram, max_seq_len)?,
            None => mixture_pairs(docs, vocab, policy, max_seq_len)?,
        };
        rows.extend(evaluate_task(models, &pairs, vocab)?);
    }
    Ok(EvalReport { corpus: corpus.to_string(), rows })
}

impl EvalReport {
    pub fn merge(mut self, other: EvalReport) -> Self {
        self.rows.extend(other.rows);
        self
    }

    pub fn get(&self, task: Task, strategy: Strategy) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.task == task && r.strategy == strategy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Strategies down, tasks across, then the mean relative length of the
    /// mixture task (or the first task present).
    pub fn to_table(&self) -> String {
        let tasks: Vec<Task> = Task::ALL.into_iter().filter(|t| self.rows.iter().any(|r| r.task == *t)).collect();
        let strategies: Vec<Strategy> = Strategy::ALL.into_iter().filter(|s| self.rows.iter().any(|r| r.strategy == *s)).collect();
        let length_task = if tasks.contains(&Task::Mixture) { Some(Task::Mixture) } else { tasks.first().copied() };

        let mut header = vec![format!("{} PPL", self.corpus)];
        header.extend(tasks.iter().map(|t| t.as_str().to_string()));
        header.push("Length".to_string());
        let mut grid = vec![header];
        for &s in &strategies {
            let mut line = vec![s.as_str().to_string()];
            for &t in &tasks {
                line.push(self.get(t, s).map(|r| format!("{:.3}", r.ppl)).unwrap_or_else(|| "-".into()));
            }
            line.push(
                length_task
                    .and_then(|t| self.get(t, s))
                    .map(|r| format!("{:.3}", r.mean_relative_length))
                    .unwrap_or_else(|| "-".into()),
            );
            grid.push(line);
        }
        let widths: Vec<usize> =
            (0..grid[0].len()).map(|c| grid.iter().map(|row| row[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &grid {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| if c == 0 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}
