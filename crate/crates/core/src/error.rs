//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A function argument violates its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A numeric result left the finite range.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// A pipeline stage failed; carries the fold and stage for diagnosis.
    /// Causes are folded into the messages here and below (rather than
    /// exposed as error sources), so chain printers don't repeat them.
    #[error("fold {fold}, stage {stage}: {cause}")]
    Stage {
        stage: &'static str,
        fold: usize,
        cause: Box<Error>,
    },

    /// A file did not match the expected on-disk format.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {cause}")]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },

    #[error("json error on {path}: {cause}")]
    Json {
        path: PathBuf,
        cause: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    pub(crate) fn stage(stage: &'static str, fold: usize, cause: Error) -> Self {
        Error::Stage { stage, fold, cause: Box::new(cause) }
    }
}
