//! Error type shared across the crate.
//!
//! The CLI maps these variants onto process exit codes, so the distinction
//! between validation, missing-dependency and I/O failures is load-bearing.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input file content (names the file and line).
    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// A precondition or domain invariant was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// Bad configuration (unknown key, unparsable value, inconsistent sizes).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape contract violation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A required upstream artifact (checkpoint, manifest) is absent.
    #[error("missing dependency: {0}")]
    MissingDependency(String),

    /// A checkpoint archive failed its integrity check.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Filesystem failure, with the offending path.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Shape(_)
            | Error::Integrity(_) => 1,
            Error::MissingDependency(_) => 2,
            Error::Io { .. } => 3,
        }
    }
}
