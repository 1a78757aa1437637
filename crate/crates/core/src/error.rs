//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("KV cache mismatch: {0}")]
    CacheMismatch(String),
    #[error("stream state mismatch: {0}")]
    StreamState(String),
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),
    #[error("invalid motion data: {0}")]
    InvalidMotion(String),
    #[error("unknown motion family: {0}")]
    UnknownFamily(String),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("training aborted: {0}")]
    TrainingAborted(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("out-of-vocabulary token id {0}")]
    OutOfVocab(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
