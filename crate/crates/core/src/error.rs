use std::io;

use crate::numerics::Precision;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("row is empty")]
    EmptyRow,

    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("row range overflows FP32 (min {min}, max {max})")]
    RangeOverflow { min: f32, max: f32 },

    #[error("{0} is not an integer precision")]
    NotInteger(Precision),

    #[error("row index {index} out of range for table with {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("accuracy reference must be positive, got {0}")]
    NonPositiveReference(f64),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error("malformed trace file, line {line}: {msg}")]
    TraceFormat { line: usize, msg: String },

    #[error("training diverged: non-finite loss")]
    Diverged,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
