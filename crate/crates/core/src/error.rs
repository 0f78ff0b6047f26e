// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures reading a checkpoint file. Each variant names the offending field.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"SNRF\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {found} (expected 1)")]
    UnsupportedVersion { found: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name}: shape {found:?} does not match config shape {expected:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("tensor {name}: payload truncated, needs bytes {start}..{end} but payload has {available}")]
    Truncated { name: String, start: u64, end: u64, available: u64 },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {name}: non-finite value at index {index}")]
    NonFinite { name: String, index: usize },
    #[error("{0} trailing payload bytes not covered by any tensor")]
    TrailingBytes(u64),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    /// Text inputs (corpora, neuron sets, reports) that fail to parse.
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    /// Two checkpoints without one-to-one neuron correspondence.
    #[error("config mismatch: {0}")]
    Correspondence(String),
    #[error("svd of {matrix} did not converge after {sweeps} sweeps")]
    NoConvergence { matrix: String, sweeps: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), line, message: message.into() }
    }

    /// Process exit code: 2 parameter, 3 input/format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) => 2,
            Error::Checkpoint(_) | Error::Format { .. } | Error::Correspondence(_) | Error::Io { .. } => 3,
            Error::NoConvergence { .. } => 4,
        }
    }

    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Param(_) => "param",
            Error::Checkpoint(_) => "checkpoint",
            Error::Format { .. } => "format",
            Error::Correspondence(_) => "correspondence",
            Error::NoConvergence { .. } => "numerical",
            Error::Io { .. } => "io",
        }
    }
}
