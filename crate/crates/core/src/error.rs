use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid item `{item}` ({field}): {message}")]
    InvalidItem {
        item: String,
        field: &'static str,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("item `{0}` is unidentifiable: fewer than two observed categories")]
    Unidentifiable(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("session error: {0}")]
    Session(#[from] SessionError),

    #[error(transparent)]
    Embedding(#[from] EmbedError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures that may succeed on retry without changing the input.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Embedding(e) if e.is_retryable())
    }
}

/// Adaptive-session protocol violations.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("item bank is empty")]
    EmptyBank,
    #[error("item pool is exhausted")]
    PoolEmpty,
    #[error("session is stopped")]
    Stopped,
    #[error("question `{got}` is not the pending question ({pending:?})")]
    OutOfOrder { pending: Option<String>, got: String },
    #[error("question `{0}` was already administered")]
    Duplicate(String),
    #[error("category {category} outside 1..={max} for `{item}`")]
    CategoryRange { item: String, category: usize, max: usize },
}

/// Failures of the external embedding endpoint.
#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding request timed out")]
    Timeout,
    #[error("embedding endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("embedding response malformed: {0}")]
    Malformed(String),
    #[error("no embedding client configured")]
    NotConfigured,
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Timeout | EmbedError::Unavailable(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
