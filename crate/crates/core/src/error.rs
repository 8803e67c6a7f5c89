use std::fmt;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a documented precondition. `field` is a dotted path
    /// to the offending value (e.g. `decision.distractors[3].rank`).
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    /// Text returned by an LLM, judge or file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("llm client: {0}")]
    Client(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Error::Validation { field: field.into(), message: message.to_string() }
    }

    pub fn parse(message: impl fmt::Display) -> Self {
        Error::Parse(message.to_string())
    }

    /// Field path for validation errors, `None` otherwise.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::Validation { field, .. } => Some(field),
            _ => None,
        }
    }
}
