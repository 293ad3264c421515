use std::path::{Path, PathBuf};

use mive_autograd::ShapeError;

/// Errors produced across the editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum MiveError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
}

pub type Result<T, E = MiveError> = std::result::Result<T, E>;

impl MiveError {
    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Self::Format(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Shape(_) => "shape",
            Self::InvalidArgument(_) => "invalid_argument",
            Self::Degenerate(_) => "degenerate",
            Self::Numeric(_) => "numeric",
            Self::Format(_) => "format",
            Self::Io { .. } => "io",
            Self::Network { .. } => "network",
        }
    }

    /// Process exit code: 2 usage, 3 data, 4 numeric failure, 5 network.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::InvalidArgument(_) => 2,
            Self::Shape(_) | Self::Degenerate(_) | Self::Format(_) | Self::Io { .. } => 3,
            Self::Numeric(_) => 4,
            Self::Network { .. } => 5,
        }
    }
}

impl From<ShapeError> for MiveError {
    fn from(e: ShapeError) -> Self {
        Self::Shape(e.to_string())
    }
}

impl From<serde_json::Error> for MiveError {
    fn from(e: serde_json::Error) -> Self {
        Self::Format(e.to_string())
    }
}
