//! Error type shared across the pipeline.
//!
//! The CLI maps each variant to a stable process exit code, so library code
//! should pick the variant by *what went wrong*, not by where it happened:
//! bad configuration or hyperparameters are [`Error::Config`], malformed or
//! inconsistent inputs are [`Error::Data`], and NaN/Inf blowups during
//! optimization are [`Error::Numerical`].

use std::path::PathBuf;

use thiserror::Error;

/// Unified error for all pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad ranges, mismatched channel chains, unknown flags.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or inconsistent data: malformed files, shape mismatches, empty inputs.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical divergence: NaN/Inf encountered during optimization.
    #[error("numerical divergence: {0}")]
    Numerical(String),

    /// Filesystem errors, annotated with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data/io, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}
