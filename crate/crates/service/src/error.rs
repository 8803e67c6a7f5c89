use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("nothing to export: no item has a decision")]
    NothingDone,

    #[error(transparent)]
    Core(peifg_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

impl From<peifg_core::Error> for ServiceError {
    fn from(e: peifg_core::Error) -> Self {
        match e {
            peifg_core::Error::Validation { field, message } => ServiceError::Validation { field, message },
            other => ServiceError::Core(other),
        }
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::Core(e.into())
    }
}

/// JSON error body: `{code, message, field}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub field: Option<String>,
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound(_) => 404,
            ServiceError::Conflict(_) | ServiceError::NothingDone => 409,
            ServiceError::Validation { .. } => 422,
            ServiceError::Core(_) | ServiceError::Io(_) | ServiceError::Journal { .. } => 500,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let code = match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation { .. } => "validation",
            ServiceError::NothingDone => "nothing_done",
            _ => "internal",
        };
        ErrorBody {
            code: code.to_string(),
            message: self.to_string(),
            field: match self {
                ServiceError::Validation { field, .. } => Some(field.clone()),
                _ => None,
            },
        }
    }
}
