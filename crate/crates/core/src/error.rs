use thiserror::Error;

/// Errors raised by tensor arithmetic, topology construction and the model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HstError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index {index} out of range for length {len} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for HstError {
    fn from(e: std::io::Error) -> Self {
        HstError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for HstError {
    fn from(e: serde_json::Error) -> Self {
        HstError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HstError>;
