use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}
