use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sentence is empty after tokenization")]
    EmptySentence,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("reference sentence is empty")]
    EmptyReference,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("encoder output has no valid position")]
    AllMasked,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("non-finite {component} loss at step {step}: {value}")]
    NonFiniteLoss {
        component: &'static str,
        step: u64,
        value: f64,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
