use thiserror::Error;

#[derive(Debug, Error)]
pub enum BrpcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("missing diagnostics: {0}")]
    MissingDiagnostics(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BrpcError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        BrpcError::InvalidInput(msg.into())
    }

    pub fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        BrpcError::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, BrpcError>;
