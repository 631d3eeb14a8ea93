//! Noun selection: part-of-speech tagging of caption words and sampling of
//! noun queries.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{TextSample, LEXICON};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Adv,
    Det,
    Pron,
    Prep,
    Conj,
    Num,
    Punct,
    Other,
}

impl PosTag {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "NOUN" => Self::Noun,
            "VERB" => Self::Verb,
            "ADJ" => Self::Adj,
            "ADV" => Self::Adv,
            "DET" => Self::Det,
            "PRON" => Self::Pron,
            "PREP" => Self::Prep,
            "CONJ" => Self::Conj,
            "NUM" => Self::Num,
            "PUNCT" => Self::Punct,
            _ => return None,
        })
    }
}

/// Assigns one tag per surface word. Implementations must be deterministic.
pub trait PosTagger: Send + Sync {
    fn tag(&self, words: &[String]) -> Vec<PosTag>;
}

/// Rule-based tagger over the bundled lexicon.
///
/// Known words take their lexicon tag; a word listed both as adjective and
/// noun is an adjective when the next word can be a noun. Unknown words are
/// tagged by suffix (`-ly` adverb, `-ing`/`-ed` verb), plural forms of known
/// nouns are nouns, and any other unknown word directly after a determiner,
/// adjective or number is a noun.
#[derive(Clone, Debug, Default)]
pub struct LexiconTagger;

fn lexicon() -> &'static HashMap<String, Vec<PosTag>> {
    static LEX: OnceLock<HashMap<String, Vec<PosTag>>> = OnceLock::new();
    LEX.get_or_init(|| {
        let mut map: HashMap<String, Vec<PosTag>> = HashMap::new();
        for line in LEXICON.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let Some(tag) = parts.next().and_then(PosTag::parse) else {
                continue;
            };
            for w in parts {
                let tags = map.entry(w.to_string()).or_default();
                if !tags.contains(&tag) {
                    tags.push(tag);
                }
            }
        }
        map
    })
}

impl LexiconTagger {
    fn known(word: &str) -> Option<&'static [PosTag]> {
        lexicon().get(word).map(Vec::as_slice)
    }

    fn singular_is_noun(word: &str) -> bool {
        let is_noun = |stem: &str| {
            !stem.is_empty() && Self::known(stem).is_some_and(|t| t.contains(&PosTag::Noun))
        };
        word.strip_suffix('s').is_some_and(is_noun)
            || word.strip_suffix("es").is_some_and(is_noun)
            || word
                .strip_suffix("ies")
                .is_some_and(|s| is_noun(&format!("{s}y")))
    }

    fn could_be_noun(word: &str) -> bool {
        Self::known(word).map_or_else(
            || Self::singular_is_noun(word),
            |t| t.contains(&PosTag::Noun),
        )
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, words: &[String]) -> Vec<PosTag> {
        let mut tags: Vec<PosTag> = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let next_nounish = words.get(i + 1).is_some_and(|n| Self::could_be_noun(n));
            let prev = tags.last().copied();
            let tag = match Self::known(w) {
                Some([single]) => *single,
                Some(many) => {
                    if many.contains(&PosTag::Adj) && many.contains(&PosTag::Noun) {
                        if next_nounish {
                            PosTag::Adj
                        } else {
                            PosTag::Noun
                        }
                    } else {
                        many[0]
                    }
                }
                None if w.chars().all(|c| c.is_ascii_punctuation()) => PosTag::Punct,
                None if w.chars().all(|c| c.is_ascii_digit()) => PosTag::Num,
                None if Self::singular_is_noun(w) => PosTag::Noun,
                None if w.len() > 3 && w.ends_with("ly") => PosTag::Adv,
                None if w.len() > 4 && (w.ends_with("ing") || w.ends_with("ed")) => PosTag::Verb,
                None if matches!(prev, Some(PosTag::Det | PosTag::Adj | PosTag::Num)) => {
                    PosTag::Noun
                }
                None => PosTag::Other,
            };
            tags.push(tag);
        }
        tags
    }
}

/// A noun of a caption used as a segmentation query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounQuery {
    pub noun_text: String,
    /// `[start, end)` token range inside the caption.
    pub token_span: (usize, usize),
    /// Position of this noun among the caption's nouns (0-based).
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounOptions {
    /// Keep repeated surface nouns at different positions as separate
    /// queries.
    pub keep_duplicates: bool,
}

impl Default for NounOptions {
    fn default() -> Self {
        Self {
            keep_duplicates: true,
        }
    }
}

/// Tags the caption words and returns its nouns in caption order.
pub fn extract_nouns(
    text: &TextSample,
    tagger: &dyn PosTagger,
    options: NounOptions,
) -> Vec<NounQuery> {
    let tags = tagger.tag(&text.words);
    let mut seen_spans = HashSet::new();
    let mut seen_text = HashSet::new();
    let mut out = Vec::new();
    for ((word, &span), tag) in text.words.iter().zip(&text.word_spans).zip(tags) {
        if tag != PosTag::Noun || span.1 > text.len || span.0 >= span.1 {
            continue;
        }
        if !seen_spans.insert(span) {
            continue;
        }
        if !options.keep_duplicates && !seen_text.insert(word.clone()) {
            continue;
        }
        out.push(NounQuery {
            noun_text: word.clone(),
            token_span: span,
            index: out.len(),
        });
    }
    out
}

/// Draws `min(count, J)` distinct queries uniformly without replacement.
pub fn sample_nouns(
    queries: &[NounQuery],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<NounQuery>> {
    assert!(count >= 1, "sample_nouns needs count >= 1");
    if queries.is_empty() {
        return Err(Error::NoTrainableNouns);
    }
    let k = count.min(queries.len());
    Ok(index::sample(rng, queries.len(), k)
        .into_iter()
        .map(|i| queries[i].clone())
        .collect())
}
