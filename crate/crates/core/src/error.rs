use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Each variant maps onto one of the process exit classes used by the CLI
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("scene infeasible: {0}")]
    SceneInfeasible(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint mismatch at `{entry}`: {msg}")]
    CheckpointMismatch { entry: String, msg: String },

    #[error("non-finite loss in scene(s) {scenes:?}: {detail}")]
    NonFiniteLoss { scenes: Vec<String>, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CheckpointMismatch { .. } => 2,
            Error::NonFiniteLoss { .. } => 4,
            Error::Parse { .. }
            | Error::SceneInfeasible(_)
            | Error::Data(_)
            | Error::InvalidInput(_)
            | Error::Io { .. } => 3,
        }
    }
}
