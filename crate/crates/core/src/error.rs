use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A NaN or infinity was produced where finite values are required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An index was out of bounds for the container it addressed.
    #[error("index {index} out of bounds for {what} of len {len}")]
    IndexOutOfBounds {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Invalid configuration or argument value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Malformed record in an interaction log.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: u64, detail: String },

    /// The prerequisite relation contains a cycle.
    #[error("prerequisite graph contains a cycle involving concept {0}")]
    CyclicPrereq(usize),

    /// Data is unusable for the requested operation (empty, degenerate, ...).
    #[error("bad data: {0}")]
    BadData(String),

    /// A checkpoint file is malformed or incompatible.
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    /// Wrapped I/O error.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Wrapped CSV error.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Wrapped JSON error.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
