use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = H2tError> = std::result::Result<T, E>;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum H2tError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A persisted artifact violates its on-disk layout.
    #[error("{0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{0}")]
    InvalidInput(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("internal: {0}")]
    Internal(String),

    /// A pipeline stage failed; the class is that of the underlying error.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        source: Box<H2tError>,
    },
}

/// Coarse error classes, used by the CLI for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Internal,
}

impl H2tError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        H2tError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        H2tError::Format(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        H2tError::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        H2tError::Config(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            H2tError::Config(_) => ErrorClass::Config,
            H2tError::Io { .. }
            | H2tError::Format(_)
            | H2tError::DimensionMismatch { .. }
            | H2tError::InvalidInput(_) => ErrorClass::Data,
            H2tError::Numeric(_) => ErrorClass::Numeric,
            H2tError::Internal(_) => ErrorClass::Internal,
            H2tError::Stage { source, .. } => source.class(),
        }
    }

    pub fn stage(self, stage: impl Into<String>) -> Self {
        H2tError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Prefixes the message with context (typically a slide id), keeping the class.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            H2tError::Format(m) => H2tError::Format(format!("{ctx}: {m}")),
            H2tError::InvalidInput(m) => H2tError::InvalidInput(format!("{ctx}: {m}")),
            H2tError::Numeric(m) => H2tError::Numeric(format!("{ctx}: {m}")),
            H2tError::Config(m) => H2tError::Config(format!("{ctx}: {m}")),
            H2tError::Internal(m) => H2tError::Internal(format!("{ctx}: {m}")),
            H2tError::DimensionMismatch { expected, found } => H2tError::InvalidInput(format!(
                "{ctx}: dimension mismatch: expected {expected}, found {found}"
            )),
            other => other,
        }
    }
}

pub(crate) fn ensure_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(H2tError::Numeric(what.to_string()))
    }
}
