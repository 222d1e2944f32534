use hst_core::HstError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Core(#[from] HstError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),
}

impl AnalysisError {
    pub fn to_json(&self) -> serde_json::Value {
        let kind = match self {
            AnalysisError::Core(HstError::Parse(_)) | AnalysisError::Parse { .. } => "parse",
            AnalysisError::Core(_) => "topology",
            AnalysisError::Io(_) => "io",
            AnalysisError::Csv(_) => "csv",
            AnalysisError::Schema(_) => "schema",
        };
        json!({ "error": kind, "message": self.to_string() })
    }
}

impl From<serde_json::Error> for AnalysisError {
    fn from(e: serde_json::Error) -> Self {
        AnalysisError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AnalysisError>;
