use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the benchmark pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data or configuration violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A record referenced by a manifest could not be read.
    #[error("failed to load record `{record_id}`: {reason}")]
    Load { record_id: String, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// A metric has no defined value for the given inputs.
    #[error("undefined metric: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl std::fmt::Display) -> Error {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Parse { .. } | Error::Config(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
