//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed file header or record (bad magic, version, field value).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Underlying I/O failure; `offset` is the byte position when known.
    #[error("i/o error at byte {offset} of {path}: {source}")]
    Io {
        path: PathBuf,
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    /// Feature channels incompatible with the requested schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Invalid parameter value (non-positive grid cell, zero counts, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Quantized coordinate outside the 21-bit-per-axis curve range.
    #[error("range error: {0}")]
    Range(String),

    /// Operation requires a non-empty input.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Incompatible tensor shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN/Inf encountered, or a zero-norm embedding where a direction is needed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Label-tree structure violation; names the offending node.
    #[error("hierarchy validation error: {0}")]
    Validation(String),

    /// Query not defined for this node (e.g. siblings of the root).
    #[error("domain error: {0}")]
    Domain(String),

    /// Text missing from an embedding table.
    #[error("embedding lookup error: no vector for {0:?}")]
    Lookup(String),

    /// Labels or samples inconsistent with the dataset's annotation rules.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid or contradictory run configuration.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, offset: u64, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            offset,
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
