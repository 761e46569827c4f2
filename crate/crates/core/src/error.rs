//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments that violate an operation's preconditions.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A parameter tensor is in a state the operation cannot use.
    #[error("rejected parameter: {0}")]
    InvalidParameter(String),

    /// Non-finite values appeared inside a forward pass.
    #[error("numerical instability in {layer}: {detail}")]
    Numerical { layer: String, detail: String },

    /// Non-finite gradient or norm; consumed by the spike guard.
    #[error("anomaly: {0}")]
    Anomaly(String),

    #[error("finite-difference oracle failure: {0}")]
    Oracle(String),

    #[error("fit failure: {0}")]
    Fit(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {detail}")]
    Aborted { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Numerical { .. } => "numerical_instability",
            Error::Anomaly(_) => "anomaly",
            Error::Oracle(_) => "oracle_failure",
            Error::Fit(_) => "fit_failure",
            Error::Range(_) => "range",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Aborted { .. } => "aborted",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
