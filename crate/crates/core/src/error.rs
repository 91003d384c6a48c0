use thiserror::Error;

/// Errors produced by the numeric core and its persistence layer.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid configuration or user-supplied parameters.
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite values in parameters, losses or gradients.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller broke an operation contract (e.g. a solver crossing a phase edge).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Training diverged; `step` is the first failing iteration.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Format(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
