use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A precondition of an operation was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration. `keys` lists every offending field.
    #[error("config error: {message} (keys: {keys:?})")]
    Config { message: String, keys: Vec<String> },

    /// Perturbation bookkeeping is out of sync (e.g. remove without apply).
    #[error("state error: {0}")]
    State(String),

    /// A loss or gradient left the finite range.
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(message: impl Into<String>, keys: &[&str]) -> Self {
        Error::Config { message: message.into(), keys: keys.iter().map(|k| k.to_string()).collect() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
