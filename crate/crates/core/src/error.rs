use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SlvError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SlvError {
    /// Tensor shapes that do not fit together.
    #[error("dimension error: {0}")]
    Shape(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scene generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("load error in {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl SlvError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by the filesystem or by unreadable files
    /// rather than by bad arguments.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Self::Io { .. } | Self::Load { .. } | Self::Format(_) | Self::Json { .. }
        )
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> SlvError {
    SlvError::Shape(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> SlvError {
    SlvError::Contract(msg.into())
}
