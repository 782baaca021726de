//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// A probability table or model violates its invariants.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Matrix or vector shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument is outside its allowed range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training or evaluation produced a non-finite value.
    #[error("numeric abort at epoch {epoch}: {detail}")]
    NumericAbort { epoch: usize, detail: String },

    /// A text input could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
