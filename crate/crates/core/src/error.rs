//! Error type shared by every module of the simulator.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent shapes, out-of-range hyperparameters, bad config keys.
    #[error("configuration error: {0}")]
    Config(String),

    /// A named configuration key failed validation or parsing.
    #[error("configuration error at `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    /// A loss, activation or gradient became NaN or infinite.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Empty or otherwise unusable input data.
    #[error("input error: {0}")]
    Input(String),

    /// A dataset file row could not be parsed.
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    /// A dataset file row parsed but violates the dataset contract.
    #[error("{path}: line {line}: {message}")]
    Validation {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn key(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigKey {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::ConfigKey { .. }
            | Error::Input(_)
            | Error::Parse { .. }
            | Error::Validation { .. } => 2,
            Error::Divergence(_) => 3,
            Error::Io { .. } | Error::Serde(_) => 4,
        }
    }
}
