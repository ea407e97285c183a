use std::path::PathBuf;

use crate::env::GridPos;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("unknown maze id `{0}`")]
    UnknownMaze(String),
    #[error("cell {0} is not free space")]
    NotFree(GridPos),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} has not been trained")]
    Untrained(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(line: usize, msg: impl Into<String>) -> Self {
        Error::Format { line, msg: msg.into() }
    }
}
