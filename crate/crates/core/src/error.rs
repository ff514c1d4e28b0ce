use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum MantisError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in {location}: {detail}")]
    Numeric { location: String, detail: String },
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl MantisError {
    /// Short machine-readable kind tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            MantisError::Validation(_) => "validation",
            MantisError::Argument(_) => "argument",
            MantisError::Config(_) => "config",
            MantisError::Numeric { .. } => "numeric",
            MantisError::Internal(_) => "internal",
            MantisError::Format(_) => "format",
            MantisError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, MantisError>;
