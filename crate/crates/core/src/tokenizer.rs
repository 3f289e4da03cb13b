//! Byte-level BPE with whitespace-aware pre-tokenization and the infilling
//! special tokens.
//!
//! Ids `0..256` are raw bytes, followed by one id per learned merge, followed
//! by the nine special tokens. Pre-tokenization attaches a single leading
//! space to the following non-space run (`" pasta"`), so the split point
//! between a non-whitespace character and a whitespace character is always a
//! piece boundary and `encode(a + b) == encode(a) ++ encode(b)` whenever `a`
//! ends in non-whitespace and `b` starts with whitespace.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::masker::Granularity;

pub type TokenId = u32;

pub const BYTE_VOCAB: usize = 256;
pub const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary size {requested} is below the floor of {floor}")]
    CorpusTooSmall { requested: usize, floor: usize },
    #[error("text contains reserved special token {0:?}")]
    UnknownSpecialInText(String),
    #[error("token id {0} is out of range")]
    UnknownId(TokenId),
    #[error("vocab file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Special {
    BlankWord,
    BlankNgram,
    BlankSentence,
    BlankParagraph,
    BlankDocument,
    Answer,
    Sep,
    Pad,
    Eos,
}

impl Special {
    pub const ALL: [Special; 9] = [
        Special::BlankWord,
        Special::BlankNgram,
        Special::BlankSentence,
        Special::BlankParagraph,
        Special::BlankDocument,
        Special::Answer,
        Special::Sep,
        Special::Pad,
        Special::Eos,
    ];

    pub fn surface(self) -> &'static str {
        match self {
            Special::BlankWord => "<|blank_word|>",
            Special::BlankNgram => "<|blank_ngram|>",
            Special::BlankSentence => "<|blank_sentence|>",
            Special::BlankParagraph => "<|blank_paragraph|>",
            Special::BlankDocument => "<|blank_document|>",
            Special::Answer => "<|answer|>",
            Special::Sep => "<|sep|>",
            Special::Pad => "<|pad|>",
            Special::Eos => "<|eos|>",
        }
    }

    pub fn blank(g: Granularity) -> Special {
        match g {
            Granularity::Word => Special::BlankWord,
            Granularity::Ngram => Special::BlankNgram,
            Granularity::Sentence => Special::BlankSentence,
            Granularity::Paragraph => Special::BlankParagraph,
            Granularity::Document => Special::BlankDocument,
        }
    }

    pub fn is_blank(self) -> bool {
        self.blank_granularity().is_some()
    }

    pub fn blank_granularity(self) -> Option<Granularity> {
        match self {
            Special::BlankWord => Some(Granularity::Word),
            Special::BlankNgram => Some(Granularity::Ngram),
            Special::BlankSentence => Some(Granularity::Sentence),
            Special::BlankParagraph => Some(Granularity::Paragraph),
            Special::BlankDocument => Some(Granularity::Document),
            _ => None,
        }
    }
}

/// Split text into pre-tokenization pieces.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let c = text[i..].chars().next().unwrap();
        if c.is_whitespace() {
            let mut end = i;
            for (off, ch) in text[i..].char_indices() {
                if !ch.is_whitespace() {
                    break;
                }
                end = i + off + ch.len_utf8();
            }
            if end < bytes.len() && bytes[end - 1] == b' ' {
                // The last space belongs to the next word.
                if end - 1 > start {
                    pieces.push(&text[start..end - 1]);
                }
                i = end - 1;
                let word_end = non_ws_end(text, end);
                pieces.push(&text[i..word_end]);
                i = word_end;
            } else {
                pieces.push(&text[start..end]);
                i = end;
            }
        } else {
            let end = non_ws_end(text, i);
            pieces.push(&text[start..end]);
            i = end;
        }
    }
    pieces
}

fn non_ws_end(text: &str, from: usize) -> usize {
    text[from..]
        .char_indices()
        .find(|(_, c)| c.is_whitespace())
        .map_or(text.len(), |(off, _)| from + off)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), u32>,
    token_bytes: Vec<Vec<u8>>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<(Special, TokenId)>,
    merges: Vec<(TokenId, TokenId)>,
    fingerprint: String,
}

impl Vocab {
    pub fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self, TokenizerError> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let n = token_bytes.len() as TokenId;
            if a >= n || b >= n {
                return Err(TokenizerError::Format(format!("merge {rank} refers to unknown id")));
            }
            let mut joined = token_bytes[a as usize].clone();
            joined.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(joined);
            if ranks.insert((a, b), rank as u32).is_some() {
                return Err(TokenizerError::Format(format!("duplicate merge {rank}")));
            }
        }
        let fingerprint = Self::compute_fingerprint(&merges);
        Ok(Self { merges, ranks, token_bytes, fingerprint })
    }

    fn compute_fingerprint(merges: &[(TokenId, TokenId)]) -> String {
        let mut h = Sha256::new();
        h.update(b"infill-vocab");
        h.update(VOCAB_FORMAT_VERSION.to_le_bytes());
        for s in Special::ALL {
            h.update(s.surface().as_bytes());
            h.update([0]);
        }
        for &(a, b) in merges {
            h.update(a.to_le_bytes());
            h.update(b.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Number of byte and merge ids.
    pub fn subword_count(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn size(&self) -> usize {
        self.subword_count() + Special::ALL.len()
    }

    pub fn special(&self, s: Special) -> TokenId {
        (self.subword_count() + s as usize) as TokenId
    }

    pub fn blank(&self, g: Granularity) -> TokenId {
        self.special(Special::blank(g))
    }

    pub fn as_special(&self, id: TokenId) -> Option<Special> {
        let idx = (id as usize).checked_sub(self.subword_count())?;
        Special::ALL.get(idx).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.as_special(id).is_some()
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<TokenId>) {
        let mut ids: Vec<TokenId> = piece.iter().map(|&b| b as TokenId).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = self.merges[rank as usize];
            let merged = (BYTE_VOCAB + rank as usize) as TokenId;
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        out.extend(ids);
    }

    /// Encode text that must not contain any special-token surface form.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError> {
        if let Some(s) = Special::ALL.iter().find(|s| text.contains(s.surface())) {
            return Err(TokenizerError::UnknownSpecialInText(s.surface().to_string()));
        }
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        for piece in pre_tokenize(text) {
            self.encode_piece(piece.as_bytes(), &mut out);
        }
        Ok(out)
    }

    /// Raw bytes of a sequence; special ids render as their surface forms.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            if let Some(bytes) = self.token_bytes(id) {
                out.extend_from_slice(bytes);
            } else if let Some(s) = self.as_special(id) {
                out.extend_from_slice(s.surface().as_bytes());
            } else {
                return Err(TokenizerError::UnknownId(id));
            }
        }
        Ok(out)
    }

    /// Decode to text; invalid UTF-8 (possible in sampled output) is replaced.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            specials: Special::ALL.iter().map(|&s| (s, self.special(s))).collect(),
            merges: self.merges.clone(),
            fingerprint: self.fingerprint.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(TokenizerError::Format(format!("unsupported version {}", file.version)));
        }
        let vocab = Self::from_merges(file.merges)?;
        for (s, id) in file.specials {
            if vocab.special(s) != id {
                return Err(TokenizerError::Format(format!("special {s:?} has id {id}")));
            }
        }
        if vocab.fingerprint != file.fingerprint {
            return Err(TokenizerError::Format("fingerprint does not match content".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vocab(size={}, merges={}, {})", self.size(), self.merges.len(), &self.fingerprint[..12])
    }
}

#[derive(Debug, Clone)]
pub struct VocabReport {
    pub vocab: Vocab,
    pub merges_requested: usize,
    pub merges_learned: usize,
}

impl VocabReport {
    /// The corpus ran out of mergeable pairs before reaching the target.
    pub fn is_short(&self) -> bool {
        self.merges_learned < self.merges_requested
    }
}

/// Learn byte-pair merges until the subword inventory (bytes plus merges)
/// reaches `target_size`. Specials are added on top.
///
/// Ties between equally frequent pairs go to the lexicographically smallest
/// `(left id, right id)`, which makes training a pure function of the piece
/// multiset.
pub fn train_vocab<'a, I>(texts: I, target_size: usize) -> Result<VocabReport, TokenizerError>
where
    I: IntoIterator<Item = &'a str>,
{
    if target_size < BYTE_VOCAB {
        return Err(TokenizerError::CorpusTooSmall { requested: target_size, floor: BYTE_VOCAB });
    }
    let mut counts: HashMap<&[u8], u64> = HashMap::new();
    for text in texts {
        for piece in pre_tokenize(text) {
            *counts.entry(piece.as_bytes()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = counts
        .into_iter()
        .map(|(bytes, c)| (bytes.iter().map(|&b| b as TokenId).collect(), c))
        .collect();
    words.sort();

    let merges_requested = target_size - BYTE_VOCAB;
    let mut merges = Vec::with_capacity(merges_requested);
    let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    while merges.len() < merges_requested {
        pair_counts.clear();
        for (ids, c) in &words {
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += c;
            }
        }
        let Some((&pair, _)) = pair_counts.iter().max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
        else {
            break;
        };
        let new_id = (BYTE_VOCAB + merges.len()) as TokenId;
        merges.push(pair);
        for (ids, _) in &mut words {
            if ids.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }
    let merges_learned = merges.len();
    Ok(VocabReport { vocab: Vocab::from_merges(merges)?, merges_requested, merges_learned })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Reference BPE: every piece occurrence kept separately as byte strings,
    /// pair statistics recomputed from scratch each round.
    fn reference_merges(corpus: &[&str], n_merges: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
        let mut ids_of: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut seqs: Vec<Vec<usize>> = corpus
            .iter()
            .flat_map(|t| pre_tokenize(t))
            .map(|p| p.bytes().map(|b| b as usize).collect())
            .collect();
        let mut out = Vec::new();
        for _ in 0..n_merges {
            let mut best: Option<((usize, usize), usize)> = None;
            let mut pairs: Vec<(usize, usize)> = seqs.iter().flat_map(|s| s.windows(2).map(|w| (w[0], w[1]))).collect();
            pairs.sort();
            pairs.dedup();
            for p in pairs {
                let n: usize = seqs.iter().map(|s| s.windows(2).filter(|w| (w[0], w[1]) == p).count()).sum();
                if best.map_or(true, |(_, bn)| n > bn) {
                    best = Some((p, n));
                }
            }
            let Some(((a, b), _)) = best else { break };
            let new = ids_of.len();
            let mut joined = ids_of[a].clone();
            joined.extend(&ids_of[b]);
            ids_of.push(joined);
            out.push((ids_of[a].clone(), ids_of[b].clone()));
            for s in &mut seqs {
                let mut i = 0;
                let mut t = Vec::new();
                while i < s.len() {
                    if i + 1 < s.len() && s[i] == a && s[i + 1] == b {
                        t.push(new);
                        i += 2;
                    } else {
                        t.push(s[i]);
                        i += 1;
                    }
                }
                *s = t;
            }
        }
        out
    }

    fn merge_strings(v: &Vocab) -> Vec<(Vec<u8>, Vec<u8>)> {
        v.merges()
            .iter()
            .map(|&(a, b)| (v.token_bytes(a).unwrap().to_vec(), v.token_bytes(b).unwrap().to_vec()))
            .collect()
    }

    #[test]
    fn toy_corpus_learns_aa_first() {
        let report = train_vocab(["aaab", "aab"], 260).unwrap();
        let merges = merge_strings(&report.vocab);
        assert_eq!(merges[0], (b"a".to_vec(), b"a".to_vec()));
        assert_eq!(merges, reference_merges(&["aaab", "aab"], 4));
        assert!(!report.is_short());
        // aa, ab, aa+b, aa+ab: both pieces are single tokens after that.
        let short = train_vocab(["aaab", "aab"], 270).unwrap();
        assert!(short.is_short());
        assert_eq!(short.merges_learned, 4);
    }

    #[test]
    fn matches_reference_on_sentences() {
        let corpus = ["She ate leftover pasta for lunch.", "He ate pasta for dinner, then lunch again.", "  odd   spacing\there\n"];
        let report = train_vocab(corpus, 256 + 40).unwrap();
        assert_eq!(merge_strings(&report.vocab), reference_merges(&corpus, 40));
    }

    #[test]
    fn below_floor() {
        assert!(matches!(train_vocab(["abc"], 200), Err(TokenizerError::CorpusTooSmall { .. })));
    }

    #[test]
    fn encode_edge_cases() {
        let v = train_vocab(["She ate leftover pasta for lunch."], 280).unwrap().vocab;
        assert!(v.encode("").unwrap().is_empty());
        let s = "She ate leftover pasta for lunch.";
        let ids = v.encode(s).unwrap();
        assert!(!ids.is_empty());
        assert_eq!(v.decode(&ids).unwrap(), s);
        assert!(v.encode("antidisestablishment").unwrap().len() > 1);
        assert!(matches!(v.encode("x <|sep|> y"), Err(TokenizerError::UnknownSpecialInText(_))));
    }

    #[test]
    fn specials_are_distinct_and_disjoint() {
        let v = train_vocab(["hello hello world"], 270).unwrap().vocab;
        let ids: Vec<TokenId> = Special::ALL.iter().map(|&s| v.special(s)).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 9);
        assert!(ids.iter().all(|&id| id as usize >= v.subword_count() && (id as usize) < v.size()));
        for s in Special::ALL {
            assert_eq!(v.as_special(v.special(s)), Some(s));
        }
        assert_eq!(v.decode(&[v.special(Special::Sep)]).unwrap(), "<|sep|>");
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = train_vocab(["aaab aab"], 258).unwrap().vocab;
        let b = train_vocab(["aaab aab"], 258).unwrap().vocab;
        let c = train_vocab(["aaab aab"], 259).unwrap().vocab;
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn json_roundtrip_and_tamper() {
        let v = train_vocab(["the cat sat on the mat"], 270).unwrap().vocab;
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        let tampered = v.to_json().replace(&v.fingerprint()[..8], "00000000");
        assert!(Vocab::from_json(&tampered).is_err());
    }

    #[test]
    fn pre_tokenize_shapes() {
        assert_eq!(pre_tokenize("She ate  pasta."), ["She", " ate", " ", " pasta."]);
        assert_eq!(pre_tokenize(" a\n\nb "), [" a", "\n\n", "b", " "]);
        assert_eq!(pre_tokenize(""), Vec::<&str>::new());
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-c ,.\n\té€]{0,40}").unwrap()
    }

    proptest! {
        #[test]
        fn roundtrip(s in text_strategy(), extra in text_strategy()) {
            let v = train_vocab([extra.as_str(), "abc abc cab, ba."], 300).unwrap().vocab;
            let ids = v.encode(&s).unwrap();
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
            prop_assert!(ids.iter().all(|&id| !v.is_special(id)));
        }

        #[test]
        fn prefix_stability(a in "[a-c.]{1,10}( [a-c.]{1,6}){0,3}", b in "[ \n]{1,3}[a-c.]{0,10}") {
            let v = train_vocab(["abc abc cab, ba. a b c"], 290).unwrap().vocab;
            let mut joined = v.encode(&a).unwrap();
            joined.extend(v.encode(&b).unwrap());
            prop_assert_eq!(v.encode(&format!("{a}{b}")).unwrap(), joined);
        }
    }
}
