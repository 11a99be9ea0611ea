use thiserror::Error;

use crate::domain::DomainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Domain(#[from] DomainError),

    #[error("observation has zero evidence under the current belief")]
    ZeroEvidence,
    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange { what: &'static str, index: usize, size: usize },
    #[error("invalid concept model: {0}")]
    InvalidModel(String),

    #[error("surprise calibration needs at least one demonstration")]
    EmptyContext,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("label space mismatch: expected {expected} classes, got {got}")]
    LabelSpaceMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("support set has {have} samples for class {class}, need {need}")]
    InsufficientSupport { class: usize, have: usize, need: usize },
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("query {0:?} has no label")]
    MissingQueryLabel(String),

    #[error("pool has {pool} items, cannot pick {k}")]
    PoolTooSmall { pool: usize, k: usize },
    #[error("pool has no embeddings")]
    MissingEmbeddings,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("backend error (status {status}): {body}")]
    Backend { status: u16, body: String },
    #[error("label token {0:?} missing from the returned top logprobs")]
    MissingLabelToken(String),
    #[error("no cached episode for {0}")]
    CacheMiss(String),
    #[error("oracle backend has no input mapped to text {0:?}")]
    UnknownInput(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("example ids do not line up: {0}")]
    MismatchedIds(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{method}: measured {measured} inferences, expected {expected}")]
    CountMismatch { method: String, measured: u64, expected: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by a remote or replay backend rather than user input.
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend { .. } | Error::MissingLabelToken(_) | Error::CacheMiss(_))
    }
}
