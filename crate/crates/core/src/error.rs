//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by dataset handling, numeric kernels, losses, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or parameter shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An input violated a documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A configuration value is out of range.
    #[error("invalid config: {0}")]
    Config(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    /// Cosine similarity was requested for a batch containing zero rows.
    #[error("degenerate embedding: {count} zero row(s), first at index {first}")]
    DegenerateEmbedding { count: usize, first: usize },

    /// Synthetic data generation could not satisfy its contract.
    #[error("generation failed: {0}")]
    Generation(String),

    /// A file could not be parsed.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    /// A checkpoint was written by an incompatible version of this tool.
    #[error("unsupported checkpoint version {found}, this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
