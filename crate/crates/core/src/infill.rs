//! Filling blanks in user text.
//!
//! # Marker grammar
//!
//! ```text
//! marker      = "[blank" [ ":" granularity ] "]"
//! granularity = "word" | "ngram" | "sentence" | "paragraph" | "document"
//! ```
//!
//! A bare `[blank]` is an n-gram blank. Any `[blank` followed by `]` or `:`
//! must complete a marker, otherwise the text is rejected; every other
//! character, including `[blanket]`, is literal text. Fills replace the
//! marker characters exactly, with no whitespace adjustment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::examples::InfillExample;
use crate::masker::{Granularity, MaskedDocument};
use crate::model::{generate, CausalLm, DecodeConfig, ModelError, StopReason};
use crate::tokenizer::{Special, TokenId, TokenizerError, Vocab};

const MARKER_OPEN: &str = "[blank";

#[derive(Debug, Error)]
pub enum InfillError {
    #[error("malformed blank marker at byte {offset}: {reason}")]
    MalformedMarker { offset: usize, reason: String },
    #[error("{blanks} blanks but {fills} fills")]
    FillCountMismatch { blanks: usize, fills: usize },
    #[error("encoded prompt of {len} tokens does not fit a context of {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Text split around its blanks: `segments.len() == blanks.len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub segments: Vec<String>,
    pub blanks: Vec<Granularity>,
}

pub fn marker(g: Granularity) -> String {
    format!("{MARKER_OPEN}:{}]", g.as_str())
}

impl Template {
    pub fn parse(text: &str) -> Result<Self, InfillError> {
        let mut segments = Vec::new();
        let mut blanks = Vec::new();
        let mut seg_start = 0;
        let mut search = 0;
        while let Some(found) = text[search..].find(MARKER_OPEN) {
            let at = search + found;
            let rest = &text[at + MARKER_OPEN.len()..];
            let bad = |reason: &str| InfillError::MalformedMarker { offset: at, reason: reason.to_string() };
            let (g, len) = if rest.starts_with(']') {
                (Granularity::Ngram, MARKER_OPEN.len() + 1)
            } else if let Some(after) = rest.strip_prefix(':') {
                let close = after.find(']').ok_or_else(|| bad("missing closing `]`"))?;
                let name = &after[..close];
                let g = name.parse::<Granularity>().map_err(|_| bad(&format!("unknown granularity `{name}`")))?;
                (g, MARKER_OPEN.len() + 1 + close + 1)
            } else {
                search = at + MARKER_OPEN.len();
                continue;
            };
            segments.push(text[seg_start..at].to_string());
            blanks.push(g);
            seg_start = at + len;
            search = seg_start;
        }
        segments.push(text[seg_start..].to_string());
        Ok(Self { segments, blanks })
    }

    pub fn from_masked(masked: &MaskedDocument<'_>) -> Self {
        Self {
            segments: masked.segments().into_iter().map(str::to_string).collect(),
            blanks: masked.granularities(),
        }
    }

    pub fn k(&self) -> usize {
        self.blanks.len()
    }

    /// Text with every blank written as an explicit `[blank:<granularity>]`.
    pub fn render(&self) -> String {
        self.fill_partial::<&str>(&[])
    }

    /// x̃ encoded segment by segment with blank ids between segments.
    pub fn encode(&self, vocab: &Vocab) -> Result<Vec<TokenId>, InfillError> {
        let mut out = Vec::new();
        for (i, seg) in self.segments.iter().enumerate() {
            out.extend(vocab.encode(seg)?);
            if let Some(&g) = self.blanks.get(i) {
                out.push(vocab.blank(g));
            }
        }
        Ok(out)
    }

    /// Replace blanks in order, requiring exactly one fill per blank.
    pub fn substitute<S: AsRef<str>>(&self, fills: &[S]) -> Result<String, InfillError> {
        if fills.len() != self.k() {
            return Err(InfillError::FillCountMismatch { blanks: self.k(), fills: fills.len() });
        }
        Ok(self.fill_partial(fills))
    }

    /// Replace the first `fills.len()` blanks; later blanks stay as markers.
    pub fn fill_partial<S: AsRef<str>>(&self, fills: &[S]) -> String {
        let mut out = String::new();
        for (i, seg) in self.segments.iter().enumerate() {
            out.push_str(seg);
            if let Some(&g) = self.blanks.get(i) {
                match fills.get(i) {
                    Some(f) => out.push_str(f.as_ref()),
                    None => {
                        let _ = write!(out, "{}", marker(g));
                    }
                }
            }
        }
        out
    }
}

/// Parse `masked_text` and substitute `fills` into its blanks.
pub fn substitute<S: AsRef<str>>(masked_text: &str, fills: &[S]) -> Result<String, InfillError> {
    Template::parse(masked_text)?.substitute(fills)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSplit {
    pub answers: Vec<Vec<TokenId>>,
    /// Blanks left without a terminated answer.
    pub shortfall: usize,
}

/// Cut generated tokens at `ANSWER` ids into at most `k` answers. Anything
/// after the `k`-th terminator is dropped, as is an unterminated tail.
pub fn split_answers(tokens: &[TokenId], answer_id: TokenId, k: usize) -> AnswerSplit {
    let mut answers = Vec::with_capacity(k);
    let mut current = Vec::new();
    for &t in tokens {
        if answers.len() == k {
            break;
        }
        if t == answer_id {
            answers.push(std::mem::take(&mut current));
        } else {
            current.push(t);
        }
    }
    let shortfall = k - answers.len();
    AnswerSplit { answers, shortfall }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillRequest {
    pub text: String,
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Overrides `decode.seed` when present.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fill {
    pub index: usize,
    pub granularity: Granularity,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub blanks: usize,
    pub answers_emitted: usize,
    pub truncated: bool,
    pub generated_tokens: usize,
    /// Special tokens other than `ANSWER` and `EOS` removed from fills.
    pub stripped_specials: usize,
    pub stop_reason: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillResult {
    pub completed_text: String,
    pub fills: Vec<Fill>,
    pub diagnostics: Diagnostics,
}

/// Decode one answer, dropping special ids. Returns the text and the number
/// of ids dropped.
fn answer_text(vocab: &Vocab, ids: &[TokenId]) -> Result<(String, usize), InfillError> {
    let kept: Vec<TokenId> = ids.iter().copied().filter(|&t| !vocab.is_special(t)).collect();
    let mut dropped = ids.len() - kept.len();
    let mut text = vocab.decode(&kept)?;
    // byte tokens can spell a surface form without using its id
    while let Some((at, len)) = Special::ALL.iter().find_map(|s| text.find(s.surface()).map(|i| (i, s.surface().len()))) {
        text.replace_range(at..at + len, "");
        dropped += 1;
    }
    Ok((text, dropped))
}

/// Fill every blank of `request.text` by sampling `x̃ SEP` continuations
/// from an ILM-trained model until one `ANSWER` per blank has appeared.
///
/// A model that stops early yields the fills it finished and
/// `diagnostics.truncated`; unfilled blanks stay as markers.
pub fn complete(lm: &dyn CausalLm, vocab: &Vocab, request: &InfillRequest) -> Result<InfillResult, InfillError> {
    let template = Template::parse(&request.text)?;
    let k = template.k();
    if k == 0 {
        return Ok(InfillResult {
            completed_text: request.text.clone(),
            fills: Vec::new(),
            diagnostics: Diagnostics {
                blanks: 0,
                answers_emitted: 0,
                truncated: false,
                generated_tokens: 0,
                stripped_specials: 0,
                stop_reason: None,
            },
        });
    }
    let mut prefix = template.encode(vocab)?;
    prefix.push(vocab.special(Special::Sep));
    if prefix.len() >= lm.max_seq_len() {
        return Err(InfillError::ContextOverflow { len: prefix.len(), limit: lm.max_seq_len() });
    }

    let answer_id = vocab.special(Special::Answer);
    let mut decode = request.decode.clone();
    decode.eos = Some(vocab.special(Special::Eos));
    if let Some(seed) = request.seed {
        decode.seed = seed;
    }
    let mut session = lm.session();
    for &t in &prefix {
        session.push(t)?;
    }
    let mut emitted = 0;
    let generation = generate(&mut *session, &decode, |toks| {
        if toks.last() == Some(&answer_id) {
            emitted += 1;
        }
        emitted == k
    })?;

    let split = split_answers(&generation.tokens, answer_id, k);
    let mut fills = Vec::with_capacity(split.answers.len());
    let mut stripped = 0;
    for (i, ids) in split.answers.iter().enumerate() {
        let (text, n) = answer_text(vocab, ids)?;
        stripped += n;
        fills.push(Fill { index: i, granularity: template.blanks[i], text });
    }
    let texts: Vec<&str> = fills.iter().map(|f| f.text.as_str()).collect();
    Ok(InfillResult {
        completed_text: template.fill_partial(&texts),
        diagnostics: Diagnostics {
            blanks: k,
            answers_emitted: split.answers.len(),
            truncated: split.shortfall > 0,
            generated_tokens: generation.tokens.len(),
            stripped_specials: stripped,
            stop_reason: Some(generation.stop),
        },
        fills,
    })
}

/// Fills recovered from the answer half `y` of an ILM example, bypassing
/// the model.
pub fn gold_fills(example: &InfillExample, vocab: &Vocab) -> Result<Vec<String>, InfillError> {
    let sep = vocab.special(Special::Sep);
    let start = example.tokens.iter().position(|&t| t == sep).map_or(example.tokens.len(), |i| i + 1);
    let split = split_answers(&example.tokens[start..], vocab.special(Special::Answer), example.k);
    if split.shortfall > 0 {
        return Err(InfillError::FillCountMismatch { blanks: example.k, fills: split.answers.len() });
    }
    split.answers.iter().map(|ids| Ok(vocab.decode(ids)?)).collect()
}
