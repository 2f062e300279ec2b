use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid numeric input: shape mismatch, empty tensor, bad step size.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid hyper-parameter or configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Optimizer state is missing something the operation needs.
    #[error("state error: {0}")]
    State(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
