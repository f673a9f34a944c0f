//! Byte-pair-encoding tokenizer trained on the corpus, plus token
//! embedding lookup.
//!
//! The base vocabulary is the 256 byte values, so tokenization is total
//! and detokenize∘tokenize is the identity on arbitrary UTF-8 input.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::params::ParamGraph;
use crate::tensor::{NodeId, TensorError};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab_size {0} must exceed base vocab + specials ({1})")]
    VocabTooSmall(usize, usize),
    #[error("bad vocab file: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Special token ids sit directly after the 256 byte tokens. They are
/// never produced by merges and never split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    ImgSlot,
    TxtOpen,
    TxtClose,
}

pub const NUM_SPECIALS: usize = 6;
pub const FIRST_MERGE_ID: u32 = 256 + NUM_SPECIALS as u32;

impl Special {
    pub fn id(self) -> u32 {
        256 + match self {
            Special::Pad => 0,
            Special::Bos => 1,
            Special::Eos => 2,
            Special::ImgSlot => 3,
            Special::TxtOpen => 4,
            Special::TxtClose => 5,
        }
    }
}

/// Trained merge list over a byte-level base vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    /// Merge pairs by rank; pair ids refer to earlier tokens only.
    merges: Vec<(u32, u32)>,
    pub vocab_size: usize,
}

impl BpeVocab {
    pub fn num_tokens(&self) -> usize {
        FIRST_MERGE_ID as usize + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte string a token expands to (specials expand to nothing).
    pub fn token_bytes(&self, id: u32) -> Vec<u8> {
        if id < 256 {
            vec![id as u8]
        } else if id < FIRST_MERGE_ID {
            Vec::new()
        } else {
            let (l, r) = self.merges[(id - FIRST_MERGE_ID) as usize];
            let mut out = self.token_bytes(l);
            out.extend(self.token_bytes(r));
            out
        }
    }
}

/// Token id sequence bounded by the model context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub max_len: usize,
}

pub const DEFAULT_MAX_LEN: usize = 128;

impl TokenSequence {
    pub fn new(ids: Vec<u32>, max_len: usize) -> Self {
        let mut seq = Self { ids, max_len };
        seq.ids.truncate(max_len);
        seq
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn apply_merge(seq: &mut Vec<u32>, left: u32, right: u32, new_id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Greedy highest-frequency pair merging until `vocab_size` is reached or
/// no pair occurs at least twice. Ties break on the lexicographically
/// smaller left token's bytes, then the right's, so training depends only
/// on the corpus multiset.
pub fn bpe_train(corpus: &[String], vocab_size: usize) -> Result<BpeVocab, TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let floor = FIRST_MERGE_ID as usize;
    if vocab_size <= floor {
        return Err(TextError::VocabTooSmall(vocab_size, floor));
    }
    let mut vocab = BpeVocab {
        merges: Vec::new(),
        vocab_size,
    };
    let mut seqs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|s| s.bytes().map(u32::from).collect())
        .collect();

    while vocab.num_tokens() < vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .min_by(|(pa, ca), (pb, cb)| {
                cb.cmp(ca)
                    .then_with(|| vocab.token_bytes(pa.0).cmp(&vocab.token_bytes(pb.0)))
                    .then_with(|| vocab.token_bytes(pa.1).cmp(&vocab.token_bytes(pb.1)))
            })
            .map(|(&p, _)| p);
        let (left, right) = match best {
            Some(p) => p,
            None => break,
        };
        let new_id = vocab.num_tokens() as u32;
        vocab.merges.push((left, right));
        for seq in &mut seqs {
            apply_merge(seq, left, right, new_id);
        }
    }
    Ok(vocab)
}

/// UTF-8 bytes to base tokens, then merges in rank order.
pub fn tokenize(text: &str, vocab: &BpeVocab) -> TokenSequence {
    let mut ids: Vec<u32> = text.bytes().map(u32::from).collect();
    for (rank, &(l, r)) in vocab.merges.iter().enumerate() {
        apply_merge(&mut ids, l, r, FIRST_MERGE_ID + rank as u32);
    }
    TokenSequence {
        ids,
        max_len: usize::MAX,
    }
}

pub fn detokenize(seq: &[u32], vocab: &BpeVocab) -> Result<String, TextError> {
    let mut bytes = Vec::new();
    for &id in seq {
        bytes.extend(vocab.token_bytes(id));
    }
    String::from_utf8(bytes).map_err(|e| TextError::BadVocabFile(e.to_string()))
}

/// Row lookup into an embedding table parameter; gradient flows into the
/// looked-up rows only.
pub fn embed_tokens(
    pg: &mut ParamGraph,
    table_name: &str,
    ids: &[usize],
) -> Result<NodeId, TensorError> {
    let table = pg.p(table_name);
    pg.graph.gather(table, ids)
}

fn escape(bytes: &[u8]) -> String {
    let mut out = String::new();
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            b'\t' => out.push_str("\\t"),
            b'\n' => out.push_str("\\n"),
            b'\r' => out.push_str("\\r"),
            0x20..=0x7e => out.push(b as char),
            _ => {
                let _ = write!(out, "\\x{b:02x}");
            }
        }
    }
    out
}

fn unescape(s: &str) -> Result<Vec<u8>, TextError> {
    let mut out = Vec::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c as u8);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push(b'\\'),
            Some('t') => out.push(b'\t'),
            Some('n') => out.push(b'\n'),
            Some('r') => out.push(b'\r'),
            Some('x') => {
                let hi = chars.next().ok_or_else(|| bad_escape(s))?;
                let lo = chars.next().ok_or_else(|| bad_escape(s))?;
                let byte = u8::from_str_radix(&format!("{hi}{lo}"), 16)
                    .map_err(|_| bad_escape(s))?;
                out.push(byte);
            }
            _ => return Err(bad_escape(s)),
        }
    }
    Ok(out)
}

fn bad_escape(s: &str) -> TextError {
    TextError::BadVocabFile(format!("bad escape in {s:?}"))
}

/// Text serialization: a version header, then one merge per line as
/// `left<TAB>right` with bytes escaped so tab/newline tokens stay on one
/// line.
pub fn vocab_to_string(vocab: &BpeVocab) -> String {
    let mut out = format!("mmfn-bpe v1 {}\n", vocab.vocab_size);
    for &(l, r) in &vocab.merges {
        let _ = writeln!(
            out,
            "{}\t{}",
            escape(&vocab.token_bytes(l)),
            escape(&vocab.token_bytes(r))
        );
    }
    out
}

pub fn save_vocab(vocab: &BpeVocab, path: &Path) -> Result<(), TextError> {
    std::fs::write(path, vocab_to_string(vocab))?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<BpeVocab, TextError> {
    vocab_from_str(&std::fs::read_to_string(path)?)
}

pub fn vocab_from_str(content: &str) -> Result<BpeVocab, TextError> {
    let mut lines = content.lines();
    let header = lines
        .next()
        .ok_or_else(|| TextError::BadVocabFile("empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("mmfn-bpe") || parts.next() != Some("v1") {
        return Err(TextError::BadVocabFile(format!("bad header {header:?}")));
    }
    let vocab_size: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TextError::BadVocabFile("missing vocab_size".into()))?;

    let mut vocab = BpeVocab {
        merges: Vec::new(),
        vocab_size,
    };
    // Rebuild id pairs from byte strings by replaying token growth.
    let mut known: Vec<(Vec<u8>, u32)> = (0u32..256).map(|b| (vec![b as u8], b)).collect();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (l, r) = line
            .split_once('\t')
            .ok_or_else(|| TextError::BadVocabFile(format!("no tab in {line:?}")))?;
        let (lb, rb) = (unescape(l)?, unescape(r)?);
        let find = |known: &[(Vec<u8>, u32)], b: &[u8]| {
            known
                .iter()
                .rev()
                .find(|(kb, _)| kb == b)
                .map(|&(_, id)| id)
                .ok_or_else(|| TextError::BadVocabFile(format!("unknown merge part {b:?}")))
        };
        let lid = find(&known, &lb)?;
        let rid = find(&known, &rb)?;
        let new_id = vocab.num_tokens() as u32;
        vocab.merges.push((lid, rid));
        let mut merged = lb;
        merged.extend(rb);
        known.push((merged, new_id));
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn abab_merge_trace() {
        // "abab": ("a","b") occurs twice -> first merge; ("ab","ab") occurs
        // once, below the count-2 floor, so training stops there
        let vocab = bpe_train(&["abab".to_string()], 1024).unwrap();
        assert_eq!(vocab.merges(), &[(b'a' as u32, b'b' as u32)]);
        let seq = tokenize("abab", &vocab);
        assert_eq!(seq.ids, vec![FIRST_MERGE_ID, FIRST_MERGE_ID]);
        assert_eq!(detokenize(&seq.ids, &vocab).unwrap(), "abab");
    }

    #[test]
    fn special_ids_are_stable() {
        assert_eq!(Special::Pad.id(), 256);
        assert_eq!(Special::Bos.id(), 257);
        assert_eq!(Special::Eos.id(), 258);
        assert_eq!(Special::ImgSlot.id(), 259);
        assert_eq!(Special::TxtOpen.id(), 260);
        assert_eq!(Special::TxtClose.id(), 261);
        assert_eq!(FIRST_MERGE_ID, 262);
    }

    #[test]
    fn specials_expand_to_nothing() {
        let vocab = bpe_train(&["xyxy".to_string()], 300).unwrap();
        assert!(vocab.token_bytes(Special::Bos.id()).is_empty());
    }

    #[test]
    fn training_is_deterministic_and_corpus_order_free() {
        let a = vec!["the cat sat".to_string(), "the dog sat".to_string()];
        let b = vec!["the dog sat".to_string(), "the cat sat".to_string()];
        let va = bpe_train(&a, 280).unwrap();
        let vb = bpe_train(&b, 280).unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn empty_corpus_and_tiny_vocab_are_errors() {
        assert!(matches!(bpe_train(&[], 300), Err(TextError::EmptyCorpus)));
        assert!(matches!(
            bpe_train(&["x".to_string()], 262),
            Err(TextError::VocabTooSmall(262, 262))
        ));
    }

    #[test]
    fn vocab_survives_text_round_trip() {
        let corpus = vec![
            "tab\tand\nnewline mixed with ünïcode bytes".to_string(),
            "tab\tand\nnewline mixed with ünïcode bytes".to_string(),
        ];
        let vocab = bpe_train(&corpus, 300).unwrap();
        let text = vocab_to_string(&vocab);
        let back = vocab_from_str(&text).unwrap();
        assert_eq!(vocab, back);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = bpe_train(&["hello hello world world".to_string()], 300).unwrap();
        save_vocab(&vocab, &path).unwrap();
        assert_eq!(load_vocab(&path).unwrap(), vocab);
    }

    #[test]
    fn load_rejects_bad_header() {
        assert!(vocab_from_str("not-a-vocab v9 10\n").is_err());
        assert!(vocab_from_str("").is_err());
    }

    #[test]
    fn truncation_only_at_the_bound() {
        let vocab = bpe_train(&["aaaa".to_string()], 263).unwrap();
        let seq = TokenSequence::new(tokenize("aaaaaaaa", &vocab).ids, 3);
        assert_eq!(seq.len(), 3);
    }

    proptest! {
        #[test]
        fn tokenize_round_trips_any_string(s in "\\PC*", extra in ".*") {
            let corpus = vec![extra.clone(), extra];
            let vocab = match bpe_train(&corpus, 300) {
                Ok(v) => v,
                Err(_) => return Ok(()),
            };
            let seq = tokenize(&s, &vocab);
            prop_assert_eq!(detokenize(&seq.ids, &vocab).unwrap(), s);
        }
    }
}
