#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Core(#[from] peifg_core::Error),

    #[error(transparent)]
    Service(#[from] peifg_service::ServiceError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(field: impl Into<String>, message: impl std::fmt::Display) -> Self {
        CliError::Config { field: field.into(), message: message.to_string() }
    }
}
