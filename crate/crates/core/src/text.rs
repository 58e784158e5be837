//! Toy subword tokenizer: frequency-built vocabulary, greedy longest-match
//! encoding, space-joined decoding. Reserved ids come first and are never
//! produced by matching ordinary text.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<mask>", "<cls>", "<sep>", "<unk>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// Longest non-reserved token, in chars; bounds the greedy scan.
    max_token_chars: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl Vocab {
    /// Rebuild from the ordinary (non-reserved) token list, e.g. out of a
    /// checkpoint's string table.
    pub fn from_tokens(ordinary: Vec<String>) -> Vocab {
        Vocab::from_ordinary_tokens(ordinary)
    }

    /// Ordinary tokens after the reserved block, in id order.
    pub fn ordinary_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    fn from_ordinary_tokens(ordinary: Vec<String>) -> Vocab {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ordinary);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let max_token_chars = tokens[RESERVED.len()..]
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(0);
        Vocab {
            tokens,
            index,
            max_token_chars,
        }
    }

    /// Keep the most frequent whitespace-delimited syllables, ties broken
    /// lexicographically, reserved tokens first.
    pub fn build(corpus: &[String], max_size: usize) -> Result<Vocab> {
        if max_size < RESERVED.len() {
            return Err(Error::Contract(format!(
                "vocab max_size {} below reserved count {}",
                max_size,
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in corpus {
            for word in line.split_whitespace() {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Ok(Vocab::from_ordinary_tokens(
            ranked.into_iter().map(|(w, _)| w.to_string()).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::Range {
                what: "vocab id",
                index: id as usize,
                size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match per whitespace word; unmatched prefixes emit
    /// `<unk>` and advance one char. Total on arbitrary UTF-8.
    pub fn encode(&self, text: &str) -> TokenSeq {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let mut pos = 0;
            while pos < chars.len() {
                let limit = (chars.len() - pos).min(self.max_token_chars.max(1));
                let mut matched = None;
                for len in (1..=limit).rev() {
                    let cand: String = chars[pos..pos + len].iter().collect();
                    if let Some(&id) = self.index.get(cand.as_str()) {
                        if id >= RESERVED.len() as u32 {
                            matched = Some((id, len));
                            break;
                        }
                    }
                }
                match matched {
                    Some((id, len)) => {
                        ids.push(id);
                        pos += len;
                    }
                    None => {
                        ids.push(UNK);
                        pos += 1;
                    }
                }
            }
        }
        TokenSeq { ids }
    }

    /// Join tokens with single spaces, dropping reserved ids.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String> {
        let mut out = String::new();
        for &id in &seq.ids {
            let tok = self.token(id)?;
            if (id as usize) < RESERVED.len() {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            let _ = write!(out, "{tok}");
        }
        Ok(out)
    }

    // ── vocab file: one ordinary token per line, id = line + reserved ──

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens[RESERVED.len()..].join("\n");
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let ordinary: Vec<String> = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.to_string())
            .collect();
        Ok(Vocab::from_ordinary_tokens(ordinary))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn build_orders_by_frequency_then_lex() {
        let v = Vocab::build(&lines(&["a a b"]), 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
    }

    #[test]
    fn empty_corpus_keeps_reserved_only() {
        let v = Vocab::build(&[], 16).unwrap();
        assert_eq!(v.len(), RESERVED.len());
    }

    #[test]
    fn truncation_by_frequency() {
        let v = Vocab::build(&lines(&["a a b"]), 6).unwrap();
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn encode_full_match() {
        let v = Vocab::build(&lines(&["lò vi sóng"]), 10).unwrap();
        let seq = v.encode("lò vi sóng");
        assert_eq!(seq.ids.len(), 3);
        assert!(seq.ids.iter().all(|&id| id >= RESERVED.len() as u32));
    }

    #[test]
    fn encode_greedy_longest_match() {
        // word "aab" with vocab {ab, a, b} → [a, ab]
        let v = Vocab::build(&lines(&["ab ab a b"]), 9).unwrap();
        let seq = v.encode("aab");
        let toks: Vec<&str> = seq.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["a", "ab"]);
    }

    #[test]
    fn unknown_word_emits_unk() {
        let v = Vocab::build(&lines(&["x"]), 6).unwrap();
        let seq = v.encode("zz");
        assert!(seq.ids.iter().all(|&id| id == UNK));
        assert!(!seq.ids.is_empty());
    }

    #[test]
    fn decode_round_trip_in_vocab() {
        let v = Vocab::build(&lines(&["lò vi sóng bát"]), 16).unwrap();
        let s = "lò vi sóng";
        assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
    }

    #[test]
    fn decode_reserved_only_is_empty() {
        let v = Vocab::build(&[], 5).unwrap();
        let s = v
            .decode(&TokenSeq {
                ids: vec![PAD, CLS, SEP, MASK],
            })
            .unwrap();
        assert_eq!(s, "");
    }

    #[test]
    fn decode_out_of_range_errors() {
        let v = Vocab::build(&[], 5).unwrap();
        assert!(v.decode(&TokenSeq { ids: vec![99] }).is_err());
    }

    #[test]
    fn encode_total_on_arbitrary_utf8() {
        let v = Vocab::build(&lines(&["xin chào"]), 8).unwrap();
        let seq = v.encode("🤖 él ạ xinchào");
        assert!(!seq.ids.is_empty());
        for &id in &seq.ids {
            assert!((id as usize) < v.len());
        }
    }

    #[test]
    fn reserved_never_matched_from_text() {
        let v = Vocab::build(&lines(&["a"]), 8).unwrap();
        for text in ["<mask>", "<pad> <cls>", "a<sep>a"] {
            let seq = v.encode(text);
            for &id in &seq.ids {
                assert!(id == UNK || id >= RESERVED.len() as u32, "{text} -> {id}");
            }
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(&lines(&["màu gì ở ô vuông"]), 12).unwrap();
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(v, back);
    }
}
