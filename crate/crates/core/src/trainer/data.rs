//! Training pairs and batch assembly.

use rand::Rng;

use super::config::{DataSource, TrainConfig};
use crate::corpus::{
    extract_nouns, generate_synthetic_corpus, load_image, load_manifest, sample_nouns, ImageSample,
    LexiconTagger, NounOptions, NounQuery, SynthConfig, SyntheticSample, TextSample, Tokenizer,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub image: ImageSample,
    pub text: TextSample,
    /// Every noun of the caption, in caption order.
    pub nouns: Vec<NounQuery>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainCorpus {
    pub pairs: Vec<TrainPair>,
}

impl TrainCorpus {
    pub fn new(pairs: Vec<TrainPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyManifest);
        }
        if pairs.iter().all(|p| p.nouns.is_empty()) {
            return Err(Error::CorpusExhausted);
        }
        Ok(Self { pairs })
    }

    pub fn from_synthetic(samples: &[SyntheticSample]) -> Result<Self> {
        Self::new(
            samples
                .iter()
                .map(|s| TrainPair {
                    image: s.image.clone(),
                    text: s.text.clone(),
                    nouns: s.nouns(),
                })
                .collect(),
        )
    }

    pub fn from_manifest(path: &std::path::Path, cfg: &TrainConfig) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let tok = Tokenizer::new(cfg.encoder.max_text_len);
        let opts = NounOptions {
            keep_duplicates: cfg.keep_duplicate_nouns,
        };
        let mut pairs = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            let image = load_image(manifest.resolve(&e.image), cfg.encoder.image_size)?;
            let text = tok.encode(&e.caption);
            let nouns = extract_nouns(&text, &LexiconTagger, opts);
            pairs.push(TrainPair { image, text, nouns });
        }
        Self::new(pairs)
    }

    /// The corpus named by the config's data source.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.data {
            DataSource::Synthetic { n, seed } => {
                let samples = generate_synthetic_corpus(&synth_config(cfg, *n, *seed))?;
                Self::from_synthetic(&samples)
            }
            DataSource::Manifest(p) => Self::from_manifest(std::path::Path::new(p), cfg),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Synthetic corpus settings matching a training config.
pub fn synth_config(cfg: &TrainConfig, n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n,
        seed,
        image_size: cfg.encoder.image_size,
        max_text_len: cfg.encoder.max_text_len,
        ..SynthConfig::default()
    }
}

/// One (image, caption, noun) triplet: indices into the corpus and into
/// the pair's noun list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub pair: usize,
    pub noun: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Distinct corpus indices, in draw order.
    pub pairs: Vec<usize>,
    pub triplets: Vec<Triplet>,
}

/// Draws pairs uniformly, skipping captions without nouns, and takes up to
/// `nouns_per_pair` distinct nouns from each until `batch_size` triplets
/// are collected. A pair is not drawn twice unless every noun-bearing pair
/// is already in the batch.
pub fn build_batch(
    corpus: &TrainCorpus,
    batch_size: usize,
    nouns_per_pair: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let bearing = corpus.pairs.iter().filter(|p| !p.nouns.is_empty()).count();
    if bearing == 0 {
        return Err(Error::CorpusExhausted);
    }
    let mut pairs: Vec<usize> = Vec::new();
    let mut triplets = Vec::with_capacity(batch_size);
    while triplets.len() < batch_size {
        let i = rng.gen_range(0..corpus.len());
        let pair = &corpus.pairs[i];
        if pair.nouns.is_empty() {
            continue;
        }
        let seen = pairs.contains(&i);
        if seen && pairs.len() < bearing {
            continue;
        }
        let k = nouns_per_pair.min(batch_size - triplets.len());
        let picked = sample_nouns(&pair.nouns, k, rng)?;
        if !seen {
            pairs.push(i);
        }
        triplets.extend(picked.into_iter().map(|q| Triplet { pair: i, noun: q.index }));
    }
    Ok(Batch { pairs, triplets })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pair(caption: &str) -> TrainPair {
        let text = Tokenizer::new(16).encode(caption);
        let nouns = extract_nouns(&text, &LexiconTagger, NounOptions::default());
        TrainPair {
            image: ImageSample::filled("x", 8, 8, [0.5; 3]).unwrap(),
            text,
            nouns,
        }
    }

    fn corpus() -> TrainCorpus {
        TrainCorpus::new(vec![
            pair("a red circle and a blue square"),
            pair("running quickly"),
            pair("a green triangle and a red square"),
            pair("a cat and a dog"),
        ])
        .unwrap()
    }

    #[test]
    fn two_nouns_per_pair_gives_half_as_many_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = build_batch(&corpus(), 4, 2, &mut rng).unwrap();
        assert_eq!(b.triplets.len(), 4);
        assert_eq!(b.pairs.len(), 2);
        assert!(!b.pairs.contains(&1));
        for p in &b.pairs {
            let nouns: Vec<_> = b.triplets.iter().filter(|t| t.pair == *p).map(|t| t.noun).collect();
            assert_eq!(nouns.len(), 2);
            assert_ne!(nouns[0], nouns[1]);
        }
    }

    #[test]
    fn fixed_seed_fixed_batch() {
        let c = corpus();
        let a = build_batch(&c, 6, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_batch(&c, 6, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_without_nouns_is_exhausted() {
        assert!(matches!(
            TrainCorpus::new(vec![pair("running quickly")]),
            Err(Error::CorpusExhausted)
        ));
    }

    #[test]
    fn small_corpora_reuse_pairs() {
        let c = TrainCorpus::new(vec![pair("a cat")]).unwrap();
        let b = build_batch(&c, 3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.pairs, vec![0]);
        assert_eq!(b.triplets.len(), 3);
    }
}
