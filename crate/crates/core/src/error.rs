use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator and trainer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("target spawn failed after {0} attempts: spawn regions are infeasible")]
    SpawnTarget(usize),

    #[error("agent spawn failed after {0} attempts: start area is infeasible")]
    SpawnAgents(usize),

    #[error("episode already finished; call reset first")]
    EpisodeFinished,

    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("non-finite loss during update: {0}")]
    NonFiniteLoss(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed {kind} file {path}: {msg}")]
    Malformed {
        kind: &'static str,
        path: PathBuf,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
