use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ftp_core::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("persistence error: {0}")]
    Persistence(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run diverged at iteration {iter}: loss = {loss}")]
    Diverged { iter: u64, loss: f64 },

    #[error(
        "constraint violated at iteration {iter}: `{name}` has distance {dist} > radius {gamma}"
    )]
    Constraint {
        iter: u64,
        name: String,
        dist: f64,
        gamma: f64,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn persistence(msg: impl Into<String>) -> Self {
        Error::Persistence(msg.into())
    }
}
