use hst_core::HstError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] HstError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite loss; a diagnostic record has been written.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Core(HstError::Config(_)) | HarnessError::Config(_) => "config",
            HarnessError::Core(HstError::Parse(_)) | HarnessError::Json(_) | HarnessError::Toml(_) => "parse",
            HarnessError::Core(HstError::Io(_)) | HarnessError::Io(_) => "io",
            HarnessError::Core(_) => "model",
            HarnessError::Csv(_) => "csv",
            HarnessError::Diverged { .. } => "diverged",
        }
    }

    /// Machine-readable form printed by the CLI on failure.
    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": self.kind(), "message": self.to_string() })
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
