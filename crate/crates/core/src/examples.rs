//! Token-level training and evaluation examples for the four strategies.
//!
//! Every strategy is built from the same segment-wise encoding of a
//! (document, mask) pair: unmasked segments and answers are encoded
//! separately, so span boundaries act as pre-tokenization barriers and the
//! answer tokens are identical wherever they appear.
//!
//! | strategy | tokens |
//! |---|---|
//! | ILM   | x̃ `SEP` a₁ `ANSWER` … aₖ `ANSWER` |
//! | LM    | x `EOS` |
//! | LMREV | reverse(x) `EOS` |
//! | LMALL | x̃ `SEP` x `EOS` |
//!
//! x̃ is x with each answer replaced by its granularity's blank id.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::masker::{MaskPolicy, MaskedDocument};
use crate::tokenizer::{Special, TokenId, TokenizerError, Vocab};

pub const DEFAULT_MAX_SEQ_LEN: usize = 256;
pub const DEFAULT_BATCH_SIZE: usize = 24;
const DATASET_MAGIC: &[u8; 8] = b"ILMDATA\0";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExampleError {
    #[error("sequence of {len} tokens exceeds the limit of {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset was built with vocab {expected}, got {actual}")]
    FingerprintMismatch { expected: String, actual: String },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    Ilm,
    Lm,
    LmRev,
    LmAll,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Ilm, Strategy::Lm, Strategy::LmRev, Strategy::LmAll];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ilm => "ILM",
            Strategy::Lm => "LM",
            Strategy::LmRev => "LMREV",
            Strategy::LmAll => "LMALL",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Every position, including x̃ and special tokens.
    #[default]
    All,
    /// Target-span tokens, plus the `ANSWER` terminators of ILM examples
    /// (they are part of y and the only way the model learns to stop).
    TargetsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub max_seq_len: usize,
    pub loss_scope: LossScope,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { max_seq_len: DEFAULT_MAX_SEQ_LEN, loss_scope: LossScope::All }
    }
}

/// `[start, end)` token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: u32,
    pub end: u32,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start: start as u32, end: end as u32 }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start as usize..self.end as usize
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfillExample {
    pub strategy: Strategy,
    pub doc_id: String,
    pub k: usize,
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub target_spans: Vec<TokenSpan>,
}

impl InfillExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.target_spans.iter().flat_map(|s| s.range())
    }

    pub fn target_tokens(&self) -> Vec<TokenId> {
        self.target_positions().map(|i| self.tokens[i]).collect()
    }

    /// Positions supervised under `scope`.
    pub fn loss_mask_for(&self, scope: LossScope) -> Vec<bool> {
        scope_mask(self.strategy, self.tokens.len(), &self.target_spans, scope)
    }
}

fn scope_mask(strategy: Strategy, len: usize, target_spans: &[TokenSpan], scope: LossScope) -> Vec<bool> {
    match scope {
        LossScope::All => vec![true; len],
        LossScope::TargetsOnly => {
            let mut m = vec![false; len];
            for s in target_spans {
                m[s.range()].iter_mut().for_each(|b| *b = true);
                if strategy == Strategy::Ilm {
                    m[s.end as usize] = true;
                }
            }
            m
        }
    }
}

/// Segment-wise encoding of one (document, mask) pair.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    /// x̃ with blank ids.
    pub masked: Vec<TokenId>,
    /// x, with span boundaries as barriers.
    pub full: Vec<TokenId>,
    /// Answer token ranges inside `full`.
    pub answer_spans: Vec<TokenSpan>,
    pub answers: Vec<Vec<TokenId>>,
    pub doc_id: String,
}

impl EncodedPair {
    pub fn new(masked: &MaskedDocument<'_>, vocab: &Vocab) -> Result<Self, ExampleError> {
        let segments = masked.segments();
        let mut xt = Vec::new();
        let mut x = Vec::new();
        let mut answer_spans = Vec::with_capacity(masked.k());
        let mut answers = Vec::with_capacity(masked.k());
        for (i, seg) in segments.iter().enumerate() {
            let ids = vocab.encode(seg)?;
            xt.extend_from_slice(&ids);
            x.extend_from_slice(&ids);
            if let Some(span) = masked.spans.get(i) {
                xt.push(vocab.blank(span.granularity));
                let ans = vocab.encode(&span.answer)?;
                answer_spans.push(TokenSpan::new(x.len(), x.len() + ans.len()));
                x.extend_from_slice(&ans);
                answers.push(ans);
            }
        }
        Ok(Self { masked: xt, full: x, answer_spans, answers, doc_id: masked.source.id.clone() })
    }

    pub fn k(&self) -> usize {
        self.answers.len()
    }
}

fn finish(
    strategy: Strategy,
    pair: &EncodedPair,
    tokens: Vec<TokenId>,
    target_spans: Vec<TokenSpan>,
    opts: &BuildOptions,
) -> Result<InfillExample, ExampleError> {
    if tokens.len() > opts.max_seq_len {
        return Err(ExampleError::SequenceTooLong { len: tokens.len(), limit: opts.max_seq_len });
    }
    let loss_mask = scope_mask(strategy, tokens.len(), &target_spans, opts.loss_scope);
    Ok(InfillExample { strategy, doc_id: pair.doc_id.clone(), k: pair.k(), tokens, loss_mask, target_spans })
}

pub fn build_ilm(pair: &EncodedPair, vocab: &Vocab, opts: &BuildOptions) -> Result<InfillExample, ExampleError> {
    let answer_id = vocab.special(Special::Answer);
    let mut tokens = pair.masked.clone();
    tokens.push(vocab.special(Special::Sep));
    let mut spans = Vec::with_capacity(pair.k());
    for ans in &pair.answers {
        spans.push(TokenSpan::new(tokens.len(), tokens.len() + ans.len()));
        tokens.extend_from_slice(ans);
        tokens.push(answer_id);
    }
    finish(Strategy::Ilm, pair, tokens, spans, opts)
}

pub fn build_lm(pair: &EncodedPair, vocab: &Vocab, opts: &BuildOptions) -> Result<InfillExample, ExampleError> {
    let mut tokens = pair.full.clone();
    tokens.push(vocab.special(Special::Eos));
    finish(Strategy::Lm, pair, tokens, pair.answer_spans.clone(), opts)
}

pub fn build_lmrev(pair: &EncodedPair, vocab: &Vocab, opts: &BuildOptions) -> Result<InfillExample, ExampleError> {
    let n = pair.full.len();
    let mut tokens: Vec<TokenId> = pair.full.iter().rev().copied().collect();
    tokens.push(vocab.special(Special::Eos));
    let spans = pair
        .answer_spans
        .iter()
        .rev()
        .map(|s| TokenSpan::new(n - s.end as usize, n - s.start as usize))
        .collect();
    finish(Strategy::LmRev, pair, tokens, spans, opts)
}

pub fn build_lmall(pair: &EncodedPair, vocab: &Vocab, opts: &BuildOptions) -> Result<InfillExample, ExampleError> {
    let mut tokens = pair.masked.clone();
    tokens.push(vocab.special(Special::Sep));
    let offset = tokens.len();
    tokens.extend_from_slice(&pair.full);
    tokens.push(vocab.special(Special::Eos));
    let spans = pair
        .answer_spans
        .iter()
        .map(|s| TokenSpan::new(offset + s.start as usize, offset + s.end as usize))
        .collect();
    finish(Strategy::LmAll, pair, tokens, spans, opts)
}

pub fn build(strategy: Strategy, pair: &EncodedPair, vocab: &Vocab, opts: &BuildOptions) -> Result<InfillExample, ExampleError> {
    match strategy {
        Strategy::Ilm => build_ilm(pair, vocab, opts),
        Strategy::Lm => build_lm(pair, vocab, opts),
        Strategy::LmRev => build_lmrev(pair, vocab, opts),
        Strategy::LmAll => build_lmall(pair, vocab, opts),
    }
}

/// All four encodings of one pair, or an error if any of them overflows, so
/// every strategy sees the same (document, mask) pairs.
pub fn build_all(pair: &EncodedPair, vocab: &Vocab, opts: &BuildOptions) -> Result<[InfillExample; 4], ExampleError> {
    Ok([
        build_ilm(pair, vocab, opts)?,
        build_lm(pair, vocab, opts)?,
        build_lmrev(pair, vocab, opts)?,
        build_lmall(pair, vocab, opts)?,
    ])
}

/// Length of the unmasked LMALL encoding, the longest any mask can produce up
/// to one barrier space per span. Used to drop over-long documents up front.
pub fn unmasked_lmall_len(raw: &str, vocab: &Vocab) -> Result<usize, ExampleError> {
    Ok(2 * vocab.encode(raw)?.len() + 2)
}

/// Example length relative to the plain language-modeling sequence (x `EOS`).
pub fn relative_length(example: &InfillExample, pair: &EncodedPair) -> f64 {
    example.len() as f64 / (pair.full.len() + 1) as f64
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub vocab_fingerprint: String,
    pub policy: Option<MaskPolicy>,
    pub loss_scope: LossScope,
    pub count: usize,
    pub counts: BTreeMap<Strategy, usize>,
    pub data_sha256: String,
}

pub fn manifest_path(data_path: &Path) -> PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Write examples to `path` and the manifest next to it.
///
/// Record layout (little endian): strategy `u8`, doc id (`u32` length +
/// UTF-8), k `u32`, n `u32`, n × `u32` token ids, ⌈n/8⌉ bytes of loss mask
/// (LSB first), span count `u32`, then `(start, end)` `u32` pairs.
pub fn write_dataset<'a, I>(
    examples: I,
    path: &Path,
    vocab_fingerprint: &str,
    policy: Option<MaskPolicy>,
    loss_scope: LossScope,
) -> Result<DatasetManifest, ExampleError>
where
    I: IntoIterator<Item = &'a InfillExample>,
{
    let file = BufWriter::new(File::create(path)?);
    let mut w = HashingWriter { inner: file, hasher: Sha256::new() };
    w.write_all(DATASET_MAGIC)?;
    put_u32(&mut w, DATASET_VERSION)?;
    put_u32(&mut w, vocab_fingerprint.len() as u32)?;
    w.write_all(vocab_fingerprint.as_bytes())?;
    let mut counts = BTreeMap::new();
    let mut count = 0;
    for ex in examples {
        w.write_all(&[ex.strategy.code()])?;
        put_u32(&mut w, ex.doc_id.len() as u32)?;
        w.write_all(ex.doc_id.as_bytes())?;
        put_u32(&mut w, ex.k as u32)?;
        put_u32(&mut w, ex.tokens.len() as u32)?;
        for &t in &ex.tokens {
            put_u32(&mut w, t)?;
        }
        let mut bits = vec![0u8; ex.loss_mask.len().div_ceil(8)];
        for (i, &b) in ex.loss_mask.iter().enumerate() {
            if b {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bits)?;
        put_u32(&mut w, ex.target_spans.len() as u32)?;
        for s in &ex.target_spans {
            put_u32(&mut w, s.start)?;
            put_u32(&mut w, s.end)?;
        }
        *counts.entry(ex.strategy).or_insert(0) += 1;
        count += 1;
    }
    w.flush()?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        vocab_fingerprint: vocab_fingerprint.to_string(),
        policy,
        loss_scope,
        count,
        counts,
        data_sha256: hex::encode(w.hasher.finalize()),
    };
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, ExampleError> {
    let text = std::fs::read_to_string(manifest_path(path))?;
    serde_json::from_str(&text).map_err(|e| ExampleError::Corrupt(format!("manifest: {e}")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExampleError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ExampleError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ExampleError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Read a dataset written by [`write_dataset`], checking it against `vocab`.
pub fn read_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<InfillExample>, ExampleError> {
    let manifest = read_manifest(path)?;
    if manifest.vocab_fingerprint != vocab.fingerprint() {
        return Err(ExampleError::FingerprintMismatch {
            expected: manifest.vocab_fingerprint,
            actual: vocab.fingerprint().to_string(),
        });
    }
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    if hex::encode(Sha256::digest(&buf)) != manifest.data_sha256 {
        return Err(ExampleError::Corrupt("data file does not match manifest hash".into()));
    }
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != DATASET_MAGIC {
        return Err(ExampleError::Corrupt("bad magic".into()));
    }
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(ExampleError::Corrupt(format!("unsupported version {version}")));
    }
    let fp_len = c.u32()? as usize;
    let fp = std::str::from_utf8(c.take(fp_len)?).map_err(|e| ExampleError::Corrupt(e.to_string()))?;
    if fp != vocab.fingerprint() {
        return Err(ExampleError::FingerprintMismatch { expected: fp.to_string(), actual: vocab.fingerprint().to_string() });
    }
    let mut out = Vec::with_capacity(manifest.count);
    while c.pos < buf.len() {
        let code = c.take(1)?[0];
        let strategy = Strategy::from_code(code).ok_or_else(|| ExampleError::Corrupt(format!("strategy code {code}")))?;
        let id_len = c.u32()? as usize;
        let doc_id = String::from_utf8(c.take(id_len)?.to_vec()).map_err(|e| ExampleError::Corrupt(e.to_string()))?;
        let k = c.u32()? as usize;
        let n = c.u32()? as usize;
        let tokens = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        let bits = c.take(n.div_ceil(8))?;
        let loss_mask = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let n_spans = c.u32()? as usize;
        let mut target_spans = Vec::with_capacity(n_spans);
        for _ in 0..n_spans {
            let (start, end) = (c.u32()?, c.u32()?);
            if start > end || end as usize > n {
                return Err(ExampleError::Corrupt(format!("span {start}..{end} outside {n} tokens")));
            }
            target_spans.push(TokenSpan { start, end });
        }
        out.push(InfillExample { strategy, doc_id, k, tokens, loss_mask, target_spans });
    }
    if out.len() != manifest.count {
        return Err(ExampleError::Corrupt(format!("manifest says {} records, found {}", manifest.count, out.len())));
    }
    Ok(out)
}
