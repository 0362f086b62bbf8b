use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("capacity exceeded: {requested} objects requested but the grid holds {capacity}")]
    Capacity { requested: usize, capacity: usize },

    #[error("malformed data: {0}")]
    Data(String),

    #[error("checksum mismatch for {path}: manifest says {expected}, file hashes to {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Capacity { .. } | Error::Data(_) | Error::Checksum { .. } => 3,
            Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
            Error::Contract(_) => 5,
        }
    }
}
