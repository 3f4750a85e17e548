use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while parsing IDX binary files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated payload, expected {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: label {label} at index {index} is outside 0..=9")]
    BadLabel {
        path: PathBuf,
        index: usize,
        label: u8,
    },
}

#[derive(Debug, Error)]
pub enum GimError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("model file error: {0}")]
    Model(String),
}

impl GimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GimError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = GimError> = std::result::Result<T, E>;
