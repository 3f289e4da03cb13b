//! Hierarchical span masking.
//!
//! [`sample_mask`] walks the document tree in pre-order and masks each node
//! with `subtree_prob`, skipping everything below a masked node. A selected
//! word becomes either a single-word span or an n-gram anchored at that word
//! and extending rightward inside its sentence. Words swallowed by an n-gram
//! are not visited again.
//!
//! Randomness comes from ChaCha8 seeded with `MaskPolicy::rng_seed`; the
//! document at corpus index `i` uses stream `i`, so documents can be masked
//! in any order or in parallel with identical results.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CharSpan, Document, HierNode, Level};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Document,
    Paragraph,
    Sentence,
    Ngram,
    Word,
}

impl Granularity {
    pub const ALL: [Granularity; 5] = [
        Granularity::Document,
        Granularity::Paragraph,
        Granularity::Sentence,
        Granularity::Ngram,
        Granularity::Word,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Document => "document",
            Granularity::Paragraph => "paragraph",
            Granularity::Sentence => "sentence",
            Granularity::Ngram => "ngram",
            Granularity::Word => "word",
        }
    }

    fn of_level(level: Level) -> Granularity {
        match level {
            Level::Document => Granularity::Document,
            Level::Paragraph => Granularity::Paragraph,
            Level::Sentence => Granularity::Sentence,
            Level::Word => Granularity::Word,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown granularity {s:?}"))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("span {index} ({start}..{end}) is not aligned to a {granularity} boundary")]
    MisalignedSpan { index: usize, start: usize, end: usize, granularity: Granularity },
    #[error("spans {first} and {second} overlap")]
    OverlappingSpans { first: usize, second: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid mask policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub granularity: Granularity,
    pub span: CharSpan,
    pub answer: String,
}

/// A document with some spans removed. Spans are sorted and disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedDocument<'a> {
    pub source: &'a Document,
    pub spans: Vec<MaskSpan>,
}

impl<'a> MaskedDocument<'a> {
    pub fn k(&self) -> usize {
        self.spans.len()
    }

    /// Unmasked text pieces; there is always one more segment than spans.
    pub fn segments(&self) -> Vec<&'a str> {
        let raw = self.source.raw.as_str();
        let mut out = Vec::with_capacity(self.spans.len() + 1);
        let mut cursor = 0;
        for s in &self.spans {
            out.push(&raw[cursor..s.span.start]);
            cursor = s.span.end;
        }
        out.push(&raw[cursor..]);
        out
    }

    pub fn answers(&self) -> Vec<&str> {
        self.spans.iter().map(|s| s.answer.as_str()).collect()
    }

    pub fn granularities(&self) -> Vec<Granularity> {
        self.spans.iter().map(|s| s.granularity).collect()
    }

    pub fn masked_word_count(&self) -> usize {
        self.source
            .words()
            .filter(|w| self.spans.iter().any(|s| s.span.contains(&w.span)))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    #[serde(default = "defaults::subtree_prob")]
    pub subtree_prob: f64,
    #[serde(default = "defaults::word_vs_ngram_prob")]
    pub word_vs_ngram_prob: f64,
    #[serde(default = "defaults::max_ngram")]
    pub max_ngram: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

mod defaults {
    pub fn subtree_prob() -> f64 {
        0.03
    }
    pub fn word_vs_ngram_prob() -> f64 {
        0.5
    }
    pub fn max_ngram() -> usize {
        8
    }
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            subtree_prob: defaults::subtree_prob(),
            word_vs_ngram_prob: defaults::word_vs_ngram_prob(),
            max_ngram: defaults::max_ngram(),
            rng_seed: 0,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<(), MaskError> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.subtree_prob) {
            return Err(MaskError::InvalidPolicy("subtree_prob must be in [0, 1]".into()));
        }
        if !prob_ok(self.word_vs_ngram_prob) {
            return Err(MaskError::InvalidPolicy("word_vs_ngram_prob must be in [0, 1]".into()));
        }
        if self.max_ngram == 0 {
            return Err(MaskError::InvalidPolicy("max_ngram must be at least 1".into()));
        }
        Ok(())
    }

    /// Generator for the document at `doc_index`.
    pub fn rng_for(&self, doc_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(doc_index);
        rng
    }
}

fn push_span(doc: &Document, spans: &mut Vec<MaskSpan>, granularity: Granularity, span: CharSpan) {
    spans.push(MaskSpan { granularity, span, answer: doc.text(span).to_string() });
}

fn visit_sentence<R: Rng>(doc: &Document, sentence: &HierNode, policy: &MaskPolicy, rng: &mut R, spans: &mut Vec<MaskSpan>) {
    let words = &sentence.children;
    let mut i = 0;
    while i < words.len() {
        if !rng.random_bool(policy.subtree_prob) {
            i += 1;
            continue;
        }
        if rng.random_bool(policy.word_vs_ngram_prob) {
            push_span(doc, spans, Granularity::Word, words[i].span);
            i += 1;
        } else {
            let max_len = policy.max_ngram.min(words.len() - i);
            let len = rng.random_range(1..=max_len);
            let span = CharSpan::new(words[i].span.start, words[i + len - 1].span.end);
            push_span(doc, spans, Granularity::Ngram, span);
            i += len;
        }
    }
}

fn visit<R: Rng>(doc: &Document, node: &HierNode, policy: &MaskPolicy, rng: &mut R, spans: &mut Vec<MaskSpan>) {
    if node.level == Level::Sentence {
        // The sentence itself is a node; its words are handled left to right.
        if rng.random_bool(policy.subtree_prob) {
            push_span(doc, spans, Granularity::Sentence, node.span);
        } else {
            visit_sentence(doc, node, policy, rng, spans);
        }
        return;
    }
    if rng.random_bool(policy.subtree_prob) {
        push_span(doc, spans, Granularity::of_level(node.level), node.span);
        return;
    }
    for child in &node.children {
        visit(doc, child, policy, rng, spans);
    }
}

/// Sample a mask for one document. Pre-order traversal produces spans already
/// sorted by start offset.
pub fn sample_mask<'a, R: Rng>(doc: &'a Document, policy: &MaskPolicy, rng: &mut R) -> MaskedDocument<'a> {
    let mut spans = Vec::new();
    visit(doc, &doc.root, policy, rng, &mut spans);
    MaskedDocument { source: doc, spans }
}

/// Build a mask from explicit `(span, granularity)` requests. An n-gram may
/// cover at most the default `max_ngram` words of one sentence.
pub fn mask_from_spec<'a>(doc: &'a Document, requested: &[(CharSpan, Granularity)]) -> Result<MaskedDocument<'a>, MaskError> {
    let mut order: Vec<usize> = (0..requested.len()).collect();
    order.sort_by_key(|&i| (requested[i].0.start, requested[i].0.end));
    for w in order.windows(2) {
        if requested[w[0]].0.overlaps(&requested[w[1]].0) {
            return Err(MaskError::OverlappingSpans { first: w[0].min(w[1]), second: w[0].max(w[1]) });
        }
    }
    for (index, &(span, granularity)) in requested.iter().enumerate() {
        if !is_aligned(doc, span, granularity) {
            return Err(MaskError::MisalignedSpan { index, start: span.start, end: span.end, granularity });
        }
    }
    let mut spans = Vec::with_capacity(requested.len());
    for i in order {
        let (span, granularity) = requested[i];
        push_span(doc, &mut spans, granularity, span);
    }
    Ok(MaskedDocument { source: doc, spans })
}

fn is_aligned(doc: &Document, span: CharSpan, granularity: Granularity) -> bool {
    let node_level = match granularity {
        Granularity::Document => return span == doc.root.span,
        Granularity::Paragraph => Level::Paragraph,
        Granularity::Sentence => Level::Sentence,
        Granularity::Word => Level::Word,
        Granularity::Ngram => {
            return doc.sentences().any(|s| {
                let start = s.children.iter().position(|w| w.span.start == span.start);
                let end = s.children.iter().position(|w| w.span.end == span.end);
                matches!((start, end), (Some(a), Some(b)) if a <= b && b - a < defaults::max_ngram())
            })
        }
    };
    doc.root.nodes_at(node_level).any(|n| n.span == span)
}

/// Every span of one granularity a document offers, in document order.
/// N-grams are all runs of 1..=`max_ngram` words inside one sentence.
pub fn candidate_spans(doc: &Document, granularity: Granularity, max_ngram: usize) -> Vec<CharSpan> {
    match granularity {
        Granularity::Document => vec![doc.root.span],
        Granularity::Paragraph => doc.root.nodes_at(Level::Paragraph).map(|n| n.span).collect(),
        Granularity::Sentence => doc.sentences().map(|n| n.span).collect(),
        Granularity::Word => doc.words().map(|n| n.span).collect(),
        Granularity::Ngram => {
            let mut out = Vec::new();
            for s in doc.sentences() {
                let w = &s.children;
                for i in 0..w.len() {
                    for len in 1..=max_ngram.min(w.len() - i) {
                        out.push(CharSpan::new(w[i].span.start, w[i + len - 1].span.end));
                    }
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskRateEstimate {
    pub rate: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Monte Carlo estimate of the fraction of tokens covered by masks.
///
/// Sample `s` masks document `s % len` using stream `s`. `weight` gives the
/// token count of a word (use `|_| 1` to count words). The standard error is
/// the delta-method error of the ratio estimator.
pub fn marginal_mask_rate<F>(docs: &[Document], policy: &MaskPolicy, n_samples: usize, weight: F) -> Result<MaskRateEstimate, MaskError>
where
    F: Fn(&str) -> usize,
{
    policy.validate()?;
    if docs.is_empty() || n_samples == 0 {
        return Err(MaskError::EmptyCorpus);
    }
    let weights: Vec<Vec<(CharSpan, f64)>> = docs
        .iter()
        .map(|d| d.words().map(|w| (w.span, weight(d.text(w.span)) as f64)).collect())
        .collect();
    let mut pairs = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let idx = s % docs.len();
        let doc = &docs[idx];
        let mut rng = policy.rng_for(s as u64);
        let masked = sample_mask(doc, policy, &mut rng);
        let mut covered = 0.0;
        let mut total = 0.0;
        let mut spans = masked.spans.iter().peekable();
        for &(w, wt) in &weights[idx] {
            total += wt;
            while spans.peek().is_some_and(|sp| sp.span.end <= w.start) {
                spans.next();
            }
            if spans.peek().is_some_and(|sp| sp.span.contains(&w)) {
                covered += wt;
            }
        }
        pairs.push((covered, total));
    }
    let n = pairs.len() as f64;
    let sum_m: f64 = pairs.iter().map(|p| p.0).sum();
    let sum_t: f64 = pairs.iter().map(|p| p.1).sum();
    let rate = sum_m / sum_t;
    let std_err = if pairs.len() > 1 {
        let mean_t = sum_t / n;
        let var: f64 = pairs.iter().map(|&(m, t)| (m - rate * t).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt() / mean_t
    } else {
        0.0
    };
    Ok(MaskRateEstimate { rate, std_err, samples: pairs.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_document;
    
    fn story() -> Document {
        parse_document("Pasta Day\n\nShe ate leftover pasta for lunch. It was good! Then she slept.").unwrap()
    }

    fn rebuild(m: &MaskedDocument) -> String {
        let segs = m.segments();
        let mut s = String::new();
        for (i, seg) in segs.iter().enumerate() {
            s.push_str(seg);
            if i < m.spans.len() {
                s.push_str(&m.spans[i].answer);
            }
        }
        s
    }

    #[test]
    fn zero_probability_masks_nothing() {
        let doc = story();
        let policy = MaskPolicy { subtree_prob: 0.0, ..Default::default() };
        for seed in 0..50 {
            assert_eq!(sample_mask(&doc, &policy, &mut policy.rng_for(seed)).k(), 0);
        }
    }

    #[test]
    fn certain_root_mask() {
        let doc = story();
        let policy = MaskPolicy { subtree_prob: 1.0, ..Default::default() };
        let m = sample_mask(&doc, &policy, &mut policy.rng_for(3));
        assert_eq!(m.k(), 1);
        assert_eq!(m.spans[0].granularity, Granularity::Document);
        assert_eq!(m.spans[0].answer, doc.raw);
        assert_eq!(m.segments(), ["", ""]);
    }

    /// Scripted generator: `gen_bool(p)` is true when the next u64 is below
    /// `p * 2^64`, so a fixed stream of 0 / u64::MAX draws steers the walk.
    struct Scripted(std::vec::IntoIter<u64>);

    impl rand::RngCore for Scripted {
        fn next_u32(&mut self) -> u32 {
            (self.next_u64() >> 32) as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0.next().expect("script exhausted")
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            for b in dest {
                *b = self.next_u64() as u8;
            }
        }
    }

    #[test]
    fn leftover_pasta_ngram() {
        let doc = parse_document("She ate leftover pasta for lunch.").unwrap();
        let policy = MaskPolicy { subtree_prob: 0.5, ..Default::default() };
        let no = u64::MAX;
        let yes = 0;
        // root, paragraph, sentence, "She", "ate" not selected; "leftover"
        // selected, n-gram branch, length draw; "for", "lunch." not selected.
        // random_range(1..=4) draws a u32 v and returns 1 + floor(4v / 2^32);
        // the script's 2^62 becomes v = 2^30 -> 2.
        let script = vec![no, no, no, no, no, yes, no, 1u64 << 62, no, no];
        let m = sample_mask(&doc, &policy, &mut Scripted(script.into_iter()));
        assert_eq!(m.k(), 1);
        assert_eq!(m.spans[0].answer, "leftover pasta");
        assert_eq!(m.spans[0].granularity, Granularity::Ngram);
    }

    #[test]
    fn determinism_and_roundtrip() {
        let doc = story();
        let policy = MaskPolicy { subtree_prob: 0.2, rng_seed: 9, ..Default::default() };
        for s in 0..200 {
            let a = sample_mask(&doc, &policy, &mut policy.rng_for(s));
            let b = sample_mask(&doc, &policy, &mut policy.rng_for(s));
            assert_eq!(a, b);
            assert_eq!(rebuild(&a), doc.raw);
        }
    }

    #[test]
    fn spec_masks() {
        let doc = parse_document("T\n\nOne a. Two b. Three c. Four d. Five e.").unwrap();
        let third = doc.sentences().nth(3).unwrap().span;
        let m = mask_from_spec(&doc, &[(third, Granularity::Sentence)]).unwrap();
        assert_eq!(m.k(), 1);
        assert_eq!(m.spans[0].answer, "Three c.");

        let none = mask_from_spec(&doc, &[]).unwrap();
        assert_eq!(none.k(), 0);
        assert_eq!(none.segments(), [doc.raw.as_str()]);

        let w: Vec<CharSpan> = doc.words().map(|w| w.span).collect();
        let overlapping = [(w[1], Granularity::Word), (CharSpan::new(w[1].start, w[2].end), Granularity::Ngram)];
        assert_eq!(mask_from_spec(&doc, &overlapping), Err(MaskError::OverlappingSpans { first: 0, second: 1 }));

        let bad = [(CharSpan::new(w[1].start + 1, w[1].end), Granularity::Word)];
        assert!(matches!(mask_from_spec(&doc, &bad), Err(MaskError::MisalignedSpan { index: 0, .. })));
        // An n-gram may not cross a sentence boundary.
        let crossing = [(CharSpan::new(w[2].start, w[3].end), Granularity::Ngram)];
        assert!(matches!(mask_from_spec(&doc, &crossing), Err(MaskError::MisalignedSpan { .. })));
    }

    #[test]
    fn spec_masks_are_sorted() {
        let doc = story();
        let w: Vec<CharSpan> = doc.words().map(|w| w.span).collect();
        let m = mask_from_spec(&doc, &[(w[4], Granularity::Word), (w[0], Granularity::Word)]).unwrap();
        assert!(m.spans[0].span.start < m.spans[1].span.start);
        assert_eq!(rebuild(&m), doc.raw);
    }

    #[test]
    fn rate_extremes() {
        let docs = vec![story()];
        let zero = MaskPolicy { subtree_prob: 0.0, ..Default::default() };
        assert_eq!(marginal_mask_rate(&docs, &zero, 100, |_| 1).unwrap().rate, 0.0);
        let one = MaskPolicy { subtree_prob: 1.0, ..Default::default() };
        assert_eq!(marginal_mask_rate(&docs, &one, 100, |_| 1).unwrap().rate, 1.0);
        assert_eq!(marginal_mask_rate(&[], &one, 100, |_| 1), Err(MaskError::EmptyCorpus));
    }

    #[test]
    fn policy_validation() {
        assert!(MaskPolicy { subtree_prob: 1.5, ..Default::default() }.validate().is_err());
        assert!(MaskPolicy { max_ngram: 0, ..Default::default() }.validate().is_err());
        assert!(MaskPolicy::default().validate().is_ok());
    }

    #[test]
    fn never_selected_script() {
        let doc = story();
        let n = doc.root.preorder().count();
        let mut rng = Scripted(vec![u64::MAX; n].into_iter());
        assert_eq!(sample_mask(&doc, &MaskPolicy::default(), &mut rng).k(), 0);
    }
}
