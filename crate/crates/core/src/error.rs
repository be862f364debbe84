use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes fed to an operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid model / environment / run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A forward or backward pass produced NaN or Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Token outside the expected id range.
    #[error("token {token} outside {expected} range")]
    TokenRange { token: usize, expected: &'static str },

    /// Malformed or truncated binary file.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Operation applied in an invalid state (e.g. stepping a finished
    /// episode, merging LoRA twice).
    #[error("state error: {0}")]
    State(String),

    /// Precondition violated by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
