//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus format error at {locus}: {message}")]
    CorpusFormat { locus: String, message: String },

    #[error("slot keys not present in registry: {keys:?}")]
    RegistryMismatch { keys: Vec<String> },

    #[error("invalid synthetic schema: {0}")]
    InvalidSchema(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("example for slot {slot} exceeds maximum sequence length even without context")]
    ExampleTooLong { slot: String },

    #[error("unknown domain: {0}")]
    UnknownDomain(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("non-finite gradient encountered in batch {batch}")]
    NonFiniteGradient { batch: usize },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("prompt scaffolding for slot {slot} exceeds maximum sequence length")]
    PromptTooLong { slot: String },

    #[error("gold and predicted states misaligned for dialog {dialog_id}: {message}")]
    Alignment { dialog_id: String, message: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("vocab file version {found} unsupported (expected {expected})")]
    VocabVersion { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
