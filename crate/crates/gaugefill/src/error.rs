use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, empty rosters, malformed specs).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with operands that violate its contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Operand shapes do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by op `{op}`")]
    Numeric { op: &'static str },

    /// Bad input data, with the offending row number when known.
    #[error("ingestion error at row {row}: {detail}")]
    Ingest { row: usize, detail: String },

    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
