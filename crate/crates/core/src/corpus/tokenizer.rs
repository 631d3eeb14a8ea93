//! Subword tokenizer with a frozen, bundled vocabulary.
//!
//! Captions are lower-cased and split into surface words (whitespace
//! separated, punctuation split off). Each word is segmented greedily into
//! the longest vocabulary pieces: a word-initial piece followed by `##`
//! continuation pieces. Every ASCII letter and digit exists as a piece, so
//! only non-ASCII symbols fall back to `<unk>`.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOT: u32 = 1;
pub const EOT: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<sot>", "<eot>", "<unk>"];
const SUFFIXES: [&str; 12] = [
    "s", "es", "ed", "ing", "er", "ers", "est", "ly", "y", "ion", "ness", "ful",
];
pub(crate) const LEXICON: &str = include_str!("lexicon.txt");

/// A tokenized caption, padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextSample {
    /// Token ids, `len` real tokens followed by [`PAD`] up to the
    /// configured maximum length.
    pub tokens: Vec<u32>,
    /// Number of unpadded tokens, including the start/end markers.
    pub len: usize,
    pub raw_text: String,
    /// Surface words that survived truncation.
    pub words: Vec<String>,
    /// `[start, end)` token range of each surface word.
    pub word_spans: Vec<(usize, usize)>,
}

impl TextSample {
    pub fn max_len(&self) -> usize {
        self.tokens.len()
    }

    /// `true` for real (unpadded) token positions.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|i| i < self.len).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pieces: Vec<String>,
    initial: HashMap<String, u32>,
    continuation: HashMap<String, u32>,
    max_len: usize,
}

fn vocabulary() -> &'static Vec<String> {
    static VOCAB: OnceLock<Vec<String>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut seen = std::collections::HashSet::new();
        let mut vocab = Vec::new();
        let mut push = |p: String| {
            if seen.insert(p.clone()) {
                vocab.push(p);
            }
        };
        for s in SPECIALS {
            push(s.to_string());
        }
        for line in LEXICON.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            for w in line.split_whitespace().skip(1) {
                push(w.to_string());
            }
        }
        for s in SUFFIXES {
            push(format!("##{s}"));
        }
        for c in ('a'..='z').chain('0'..='9') {
            push(c.to_string());
            push(format!("##{c}"));
        }
        vocab
    })
}

impl Tokenizer {
    pub fn new(max_len: usize) -> Self {
        assert!(max_len >= 3, "max_len must fit <sot>, one token and <eot>");
        let pieces = vocabulary().clone();
        let mut initial = HashMap::new();
        let mut continuation = HashMap::new();
        for (i, p) in pieces.iter().enumerate() {
            if let Some(rest) = p.strip_prefix("##") {
                continuation.insert(rest.to_string(), i as u32);
            } else if !p.starts_with('<') {
                initial.insert(p.clone(), i as u32);
            }
        }
        Self {
            pieces,
            initial,
            continuation,
            max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    /// Lower-cases and splits text into surface words.
    pub fn split_words(text: &str) -> Vec<String> {
        let mut words = Vec::new();
        for chunk in text.split_whitespace() {
            let mut cur = String::new();
            for ch in chunk.chars().flat_map(char::to_lowercase) {
                if ch.is_ascii_punctuation() {
                    if !cur.is_empty() {
                        words.push(std::mem::take(&mut cur));
                    }
                    words.push(ch.to_string());
                } else {
                    cur.push(ch);
                }
            }
            if !cur.is_empty() {
                words.push(cur);
            }
        }
        words
    }

    /// Greedy longest-match segmentation of one lower-case word.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let table = if start == 0 {
                &self.initial
            } else {
                &self.continuation
            };
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let piece: String = chars[start..end].iter().collect();
                if let Some(&id) = table.get(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    start += 1;
                }
            }
        }
        out
    }

    /// Tokenizes a caption, dropping trailing words that do not fit.
    pub fn encode(&self, text: &str) -> TextSample {
        let mut tokens = vec![SOT];
        let mut words = Vec::new();
        let mut word_spans = Vec::new();
        for w in Self::split_words(text) {
            let ids = self.encode_word(&w);
            if tokens.len() + ids.len() + 1 > self.max_len {
                break;
            }
            let start = tokens.len();
            tokens.extend(ids);
            word_spans.push((start, tokens.len()));
            words.push(w);
        }
        tokens.push(EOT);
        let len = tokens.len();
        tokens.resize(self.max_len, PAD);
        TextSample {
            tokens,
            len,
            raw_text: text.to_string(),
            words,
            word_spans,
        }
    }

    /// Token ids of a phrase without start/end markers or padding.
    pub fn encode_phrase(&self, text: &str) -> Vec<u32> {
        Self::split_words(text)
            .iter()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Reassembles the surface text of a token range.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let p = self.piece(id);
            if let Some(rest) = p.strip_prefix("##") {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(p);
            }
        }
        out
    }

    /// Validates a sample against this tokenizer's length limit.
    pub fn check(&self, text: &TextSample) -> Result<()> {
        if text.tokens.len() > self.max_len {
            return Err(Error::TooLong {
                len: text.tokens.len(),
                max: self.max_len,
            });
        }
        if text.len == 0 {
            return Err(Error::AllPadText);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_words_are_single_tokens() {
        let tok = Tokenizer::new(16);
        let t = tok.encode("A red circle and a blue square");
        assert_eq!(t.words, ["a", "red", "circle", "and", "a", "blue", "square"]);
        assert_eq!(t.len, 9);
        assert_eq!(t.tokens.len(), 16);
        assert_eq!(t.tokens[0], SOT);
        assert_eq!(t.tokens[8], EOT);
        assert!(t.tokens[9..].iter().all(|&id| id == PAD));
        for (i, &(s, e)) in t.word_spans.iter().enumerate() {
            assert_eq!(e - s, 1);
            assert_eq!(tok.decode(&t.tokens[s..e]), t.words[i]);
        }
    }

    #[test]
    fn unknown_words_split_into_subwords() {
        let tok = Tokenizer::new(32);
        let ids = tok.encode_word("zebras");
        assert!(ids.len() > 1);
        assert_eq!(tok.decode(&ids), "zebras");
        assert_eq!(tok.encode_word("cars").len(), 2);
    }

    #[test]
    fn punctuation_is_split_off() {
        assert_eq!(
            Tokenizer::split_words("Cars, at night."),
            ["cars", ",", "at", "night", "."]
        );
    }

    #[test]
    fn truncation_keeps_whole_words_and_markers() {
        let tok = Tokenizer::new(5);
        let t = tok.encode("a red circle and a blue square");
        assert_eq!(t.len, 5);
        assert_eq!(t.words.len(), 3);
        assert_eq!(t.tokens[4], EOT);
    }

    #[test]
    fn vocabulary_is_stable() {
        let a = Tokenizer::new(8);
        let b = Tokenizer::new(8);
        assert_eq!(a.vocab_size(), b.vocab_size());
        assert_eq!(a.encode_word("circle"), b.encode_word("circle"));
        assert_eq!(a.piece(PAD), "<pad>");
        assert_eq!(a.piece(UNK), "<unk>");
    }

    #[test]
    fn non_ascii_falls_back_to_unk() {
        let tok = Tokenizer::new(8);
        assert_eq!(tok.encode_word("é"), vec![UNK]);
    }
}
