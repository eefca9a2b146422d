use thiserror::Error;

/// Errors surfaced by tensor ops, model construction, training and I/O.
#[derive(Error, Debug)]
pub enum ExnError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("graph misuse: {0}")]
    Graph(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExnError>;

impl ExnError {
    pub fn shape(msg: impl Into<String>) -> Self {
        ExnError::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        ExnError::InvalidArg(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        ExnError::Numeric(msg.into())
    }
    pub fn graph(msg: impl Into<String>) -> Self {
        ExnError::Graph(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        ExnError::Format(msg.into())
    }
}
