use thiserror::Error;

use crate::knowledge::TaskId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cycle {cycle} is not after the last stored cycle {last}")]
    Ordering { cycle: u64, last: u64 },

    #[error("unknown cycle {0}")]
    UnknownCycle(u64),

    #[error("unknown task {0}")]
    UnknownTask(TaskId),

    #[error("unknown record {0}")]
    UnknownRecord(usize),

    #[error("model registry: {0}")]
    Registry(String),

    #[error("hyperparameter search failed: all {0} trials failed")]
    SearchFailed(usize),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error("managed system has no more cycles")]
    EndOfRun,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
