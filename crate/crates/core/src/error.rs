use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("episode has {observations} observations but {actions} actions (expected observations = actions + 1)")]
    EpisodeLength { observations: usize, actions: usize },

    #[error("no episode of length >= {0} available for sampling")]
    NoEligibleEpisode(usize),

    #[error("environment error: {0}")]
    Env(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite {name} loss at step {step}")]
    NonFinite { name: &'static str, step: u64 },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
