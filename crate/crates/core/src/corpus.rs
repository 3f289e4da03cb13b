//! Corpus ingestion and the document → paragraph → sentence → word hierarchy.
//!
//! Offsets are byte offsets into [`Document::raw`] and always fall on `char`
//! boundaries. Words are maximal runs of non-whitespace and keep any attached
//! punctuation, so the leaves plus the gaps between them rebuild the raw text.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document contains no word characters")]
    EmptyDocument,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
}

/// A half-open byte range `[start, end)` into a document's raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn contains(&self, other: &CharSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &CharSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Document,
    Paragraph,
    Sentence,
    Word,
}

impl Level {
    fn child(self) -> Option<Level> {
        match self {
            Level::Document => Some(Level::Paragraph),
            Level::Paragraph => Some(Level::Sentence),
            Level::Sentence => Some(Level::Word),
            Level::Word => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierNode {
    pub level: Level,
    pub span: CharSpan,
    pub children: Vec<HierNode>,
}

impl HierNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Pre-order iterator over this node and all descendants.
    pub fn preorder(&self) -> impl Iterator<Item = &HierNode> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children.iter().rev());
            Some(node)
        })
    }

    pub fn nodes_at(&self, level: Level) -> impl Iterator<Item = &HierNode> {
        self.preorder().filter(move |n| n.level == level)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub raw: String,
    pub root: HierNode,
    /// The first paragraph holds metadata (a title line, subject, ...).
    pub meta_first_paragraph: bool,
}

impl Document {
    pub fn text(&self, span: CharSpan) -> &str {
        &self.raw[span.range()]
    }

    pub fn paragraphs(&self) -> &[HierNode] {
        &self.root.children
    }

    pub fn sentences(&self) -> impl Iterator<Item = &HierNode> {
        self.root.nodes_at(Level::Sentence)
    }

    pub fn words(&self) -> impl Iterator<Item = &HierNode> {
        self.root.nodes_at(Level::Word)
    }

    pub fn word_count(&self) -> usize {
        self.words().count()
    }

    /// Rebuild the raw text from word leaves and the separator characters
    /// between them.
    pub fn reconstruct(&self) -> String {
        let mut out = String::with_capacity(self.raw.len());
        let mut cursor = self.root.span.start;
        for word in self.words() {
            out.push_str(&self.raw[cursor..word.span.start]);
            out.push_str(self.text(word.span));
            cursor = word.span.end;
        }
        out.push_str(&self.raw[cursor..self.root.span.end]);
        out
    }
}

fn is_sentence_end(word: &str) -> bool {
    matches!(word.chars().last(), Some('.' | '!' | '?'))
}

/// Byte spans of maximal non-whitespace runs in `text[range]`.
fn word_spans(text: &str, range: Range<usize>) -> Vec<CharSpan> {
    let base = range.start;
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text[range.clone()].char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(base + i),
            (true, Some(s)) => {
                spans.push(CharSpan::new(s, base + i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(CharSpan::new(s, range.end));
    }
    spans
}

/// Paragraph blocks: separated by one or more lines that are empty or
/// whitespace-only. Each returned span is trimmed to its first/last word.
fn paragraph_spans(raw: &str) -> Vec<CharSpan> {
    let words = word_spans(raw, 0..raw.len());
    let mut paragraphs = Vec::new();
    let mut current: Option<CharSpan> = None;
    for w in words {
        if let Some(p) = current.as_mut() {
            let gap = &raw[p.end..w.start];
            if gap.matches('\n').count() >= 2 {
                paragraphs.push(*p);
                current = Some(w);
            } else {
                p.end = w.end;
            }
        } else {
            current = Some(w);
        }
    }
    paragraphs.extend(current);
    paragraphs
}

fn leaf(span: CharSpan) -> HierNode {
    HierNode { level: Level::Word, span, children: Vec::new() }
}

fn branch(level: Level, children: Vec<HierNode>) -> HierNode {
    let span = CharSpan::new(children[0].span.start, children[children.len() - 1].span.end);
    HierNode { level, span, children }
}

fn sentences_of(raw: &str, para: CharSpan) -> Vec<HierNode> {
    let mut sentences = Vec::new();
    let mut words = Vec::new();
    for w in word_spans(raw, para.range()) {
        words.push(leaf(w));
        if is_sentence_end(&raw[w.range()]) {
            sentences.push(branch(Level::Sentence, std::mem::take(&mut words)));
        }
    }
    if !words.is_empty() {
        sentences.push(branch(Level::Sentence, words));
    }
    sentences
}

/// Parse raw text into the granularity hierarchy.
///
/// The root spans the whole string, including leading/trailing whitespace,
/// so masking the root removes everything.
pub fn parse_document(raw: &str) -> Result<Document, CorpusError> {
    parse_document_with_id(String::new(), raw, false)
}

pub fn parse_document_with_id(
    id: String,
    raw: &str,
    meta_first_paragraph: bool,
) -> Result<Document, CorpusError> {
    let paragraphs: Vec<HierNode> = paragraph_spans(raw)
        .into_iter()
        .map(|p| branch(Level::Paragraph, sentences_of(raw, p)))
        .collect();
    if paragraphs.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    let root = HierNode {
        level: Level::Document,
        span: CharSpan::new(0, raw.len()),
        children: paragraphs,
    };
    Ok(Document { id, raw: raw.to_string(), root, meta_first_paragraph })
}

/// Check the structural invariants of a parsed tree.
pub fn validate(doc: &Document) -> Result<(), String> {
    fn walk(node: &HierNode, raw: &str) -> Result<(), String> {
        if node.span.is_empty() {
            return Err(format!("empty span at {:?}", node.level));
        }
        if !raw.is_char_boundary(node.span.start) || !raw.is_char_boundary(node.span.end) {
            return Err(format!("span {:?} splits a character", node.span));
        }
        if node.is_leaf() != (node.level == Level::Word) {
            return Err(format!("{:?} node has wrong leaf status", node.level));
        }
        let mut prev_end = node.span.start;
        for child in &node.children {
            if Some(child.level) != node.level.child() {
                return Err(format!("{:?} under {:?}", child.level, node.level));
            }
            if !node.span.contains(&child.span) || child.span.start < prev_end {
                return Err(format!("child span {:?} out of order", child.span));
            }
            prev_end = child.span.end;
            walk(child, raw)?;
        }
        Ok(())
    }
    walk(&doc.root, &doc.raw)?;
    if doc.reconstruct() != doc.raw {
        return Err("reconstruction differs from raw".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// UTF-8 text, documents separated by one empty line.
    BlanklineTxt,
    /// One JSON object per line: `{"text": ..., "id"?: ..., "has_meta"?: bool}`.
    Jsonl,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Every document starts with a metadata line (e.g. a title). Applies to
    /// the txt format and to jsonl records without their own `has_meta`.
    #[serde(default)]
    pub has_meta: bool,
}

#[derive(Debug, Deserialize)]
struct JsonlRecord {
    text: String,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    has_meta: Option<bool>,
}

/// When a document declares a metadata line, the line break after it is
/// widened to a paragraph break so the title becomes its own paragraph.
fn promote_meta_line(text: &str) -> String {
    match text.find('\n') {
        Some(i) if !text[i + 1..].starts_with('\n') => {
            let mut s = String::with_capacity(text.len() + 1);
            s.push_str(&text[..=i]);
            s.push('\n');
            s.push_str(&text[i + 1..]);
            s
        }
        _ => text.to_string(),
    }
}

fn make_doc(index: usize, id: Option<String>, text: &str, meta: bool) -> Result<Document, CorpusError> {
    let id = id.unwrap_or_else(|| format!("doc-{index:06}"));
    let raw = if meta { promote_meta_line(text) } else { text.to_string() };
    parse_document_with_id(id, &raw, meta).map_err(|e| match e {
        CorpusError::EmptyDocument => CorpusError::MalformedRecord {
            index,
            reason: "empty document".into(),
        },
        other => other,
    })
}

/// Split blankline-delimited text into document blocks.
pub fn split_blocks(text: &str) -> Vec<&str> {
    let text = text.strip_suffix('\n').unwrap_or(text);
    text.split("\n\n").filter(|b| !b.trim().is_empty()).collect()
}

/// Parse a corpus held in memory. Records keep file order.
pub fn parse_corpus(text: &str, format: CorpusFormat, opts: LoadOptions) -> Result<Vec<Document>, CorpusError> {
    match format {
        CorpusFormat::BlanklineTxt => split_blocks(text)
            .into_iter()
            .enumerate()
            .map(|(i, block)| make_doc(i, None, block, opts.has_meta))
            .collect(),
        CorpusFormat::Jsonl => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let rec: JsonlRecord = serde_json::from_str(line)
                    .map_err(|e| CorpusError::MalformedRecord { index: i, reason: e.to_string() })?;
                make_doc(i, rec.id, &rec.text, rec.has_meta.unwrap_or(opts.has_meta))
            })
            .collect(),
    }
}

/// Stream documents from a file in order.
pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    opts: LoadOptions,
) -> Result<Box<dyn Iterator<Item = Result<Document, CorpusError>>>, CorpusError> {
    let file = File::open(path)?;
    match format {
        CorpusFormat::Jsonl => {
            let lines = BufReader::new(file).lines().enumerate();
            Ok(Box::new(lines.filter_map(move |(i, line)| {
                let line = match line {
                    Ok(l) => l,
                    Err(e) => return Some(Err(e.into())),
                };
                if line.trim().is_empty() {
                    return None;
                }
                Some(
                    serde_json::from_str::<JsonlRecord>(&line)
                        .map_err(|e| CorpusError::MalformedRecord { index: i, reason: e.to_string() })
                        .and_then(|rec| make_doc(i, rec.id, &rec.text, rec.has_meta.unwrap_or(opts.has_meta))),
                )
            })))
        }
        CorpusFormat::BlanklineTxt => {
            // Blocks can span many lines; the txt format is read whole.
            let mut text = String::new();
            BufReader::new(file).read_to_string(&mut text)?;
            Ok(Box::new(parse_corpus(&text, format, opts)?.into_iter().map(Ok)))
        }
    }
}

pub fn load_corpus_vec(path: &Path, format: CorpusFormat, opts: LoadOptions) -> Result<Vec<Document>, CorpusError> {
    load_corpus(path, format, opts)?.collect()
}

/// Serialize documents as jsonl records that [`load_corpus`] reads back
/// unchanged.
pub fn to_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        let rec = serde_json::json!({ "id": d.id, "text": d.raw, "has_meta": d.meta_first_paragraph });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(doc: &Document) -> Vec<Vec<usize>> {
        doc.paragraphs()
            .iter()
            .map(|p| p.children.iter().map(|s| s.children.len()).collect())
            .collect()
    }

    #[test]
    fn title_and_two_sentences() {
        let doc = parse_document("Title\n\nA b. C d!").unwrap();
        assert_eq!(shape(&doc), vec![vec![1], vec![2, 2]]);
        validate(&doc).unwrap();
    }

    #[test]
    fn single_sentence() {
        let doc = parse_document("She ate leftover pasta for lunch.").unwrap();
        assert_eq!(shape(&doc), vec![vec![6]]);
        let words: Vec<&str> = doc.words().map(|w| doc.text(w.span)).collect();
        assert_eq!(words, ["She", "ate", "leftover", "pasta", "for", "lunch."]);
    }

    #[test]
    fn single_word() {
        let doc = parse_document("Hello").unwrap();
        assert_eq!(shape(&doc), vec![vec![1]]);
        assert_eq!(doc.reconstruct(), "Hello");
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(parse_document(""), Err(CorpusError::EmptyDocument)));
        assert!(matches!(parse_document(" \n\t\n"), Err(CorpusError::EmptyDocument)));
    }

    #[test]
    fn whitespace_and_unicode_survive() {
        let raw = "  Über  café.\tNaïve?\n \n\n  end  \n";
        let doc = parse_document(raw).unwrap();
        validate(&doc).unwrap();
        assert_eq!(shape(&doc), vec![vec![2, 1], vec![1]]);
        assert_eq!(doc.root.span, CharSpan::new(0, raw.len()));
    }

    #[test]
    fn txt_blocks() {
        let docs = parse_corpus("One doc.\n\nTwo doc.\n", CorpusFormat::BlanklineTxt, LoadOptions::default()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1].raw, "Two doc.");
        assert_eq!(docs[0].id, "doc-000000");
    }

    #[test]
    fn jsonl_record() {
        let docs = parse_corpus(r#"{"text": "Hi there.", "id": "a"}"#, CorpusFormat::Jsonl, LoadOptions::default())
            .unwrap();
        assert_eq!(docs[0].raw, "Hi there.");
        assert_eq!(docs[0].id, "a");
        assert!(!docs[0].meta_first_paragraph);
    }

    #[test]
    fn story_with_title() {
        let rec = r#"{"text": "Pasta Day\nAnn woke up. She was hungry. She found pasta. She ate it. She smiled.", "has_meta": true}"#;
        let docs = parse_corpus(rec, CorpusFormat::Jsonl, LoadOptions::default()).unwrap();
        let doc = &docs[0];
        assert!(doc.meta_first_paragraph);
        assert_eq!(doc.paragraphs().len(), 2);
        assert_eq!(doc.paragraphs()[1].children.len(), 5);
        validate(doc).unwrap();

        let txt = "Pasta Day\nAnn woke up. She smiled.\n\nOther\nBob ran.";
        let docs = parse_corpus(txt, CorpusFormat::BlanklineTxt, LoadOptions { has_meta: true }).unwrap();
        assert_eq!(docs.len(), 2);
        assert!(docs.iter().all(|d| d.paragraphs().len() == 2));
    }

    #[test]
    fn malformed_jsonl_reports_index() {
        let text = "{\"text\": \"ok.\"}\n{\"txt\": 1}\n";
        match parse_corpus(text, CorpusFormat::Jsonl, LoadOptions::default()) {
            Err(CorpusError::MalformedRecord { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_file_roundtrip() {
        let docs = parse_corpus("A b.\n\nC d. E.\n", CorpusFormat::BlanklineTxt, LoadOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, to_jsonl(&docs)).unwrap();
        let back = load_corpus_vec(&path, CorpusFormat::Jsonl, LoadOptions::default()).unwrap();
        assert_eq!(back, docs);
    }
}
