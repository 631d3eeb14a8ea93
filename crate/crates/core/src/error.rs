use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error("invalid image sample: {0}")]
    InvalidImage(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence of {len} tokens exceeds max_text_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty noun")]
    EmptyNoun,
    #[error("no trainable nouns")]
    NoTrainableNouns,
    #[error("corpus has no caption with a noun")]
    CorpusExhausted,
    #[error("text contains only padding")]
    AllPadText,
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("non-finite loss term {term} at step {step}")]
    NonFiniteLoss { term: String, step: u64 },
    #[error("empty class vocabulary")]
    EmptyVocabulary,
    #[error("invalid class vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    CheckpointChecksum,
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("synthetic corpus: {0}")]
    Synthetic(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
