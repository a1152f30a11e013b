use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid bit width {0} (must be in 0..=15)")]
    InvalidBitWidth(u32),

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("empty input")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("catalog hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },

    #[error("AUC undefined: split contains a single class")]
    SingleClass,

    #[error("feature id {id} out of range (n = {n})")]
    OutOfRange { id: usize, n: usize },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
