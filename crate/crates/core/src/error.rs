//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix extents do not line up.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A caller violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration; the message lists every problem found.
    #[error("invalid config: {0}")]
    Config(String),

    /// Non-finite values or a numerically unusable input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input carries too little signal for the operation (e.g. no tissue pixels).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A metric is undefined on this input (e.g. empty class row).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Manifest or config text could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A binary or JSON artifact does not match its expected layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dim(_)
                | Error::Contract(_)
                | Error::Config(_)
                | Error::Parse { .. }
        )
    }
}
