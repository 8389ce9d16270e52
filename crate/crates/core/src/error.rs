use std::path::PathBuf;

use irisseg_tensor::TensorError;
use thiserror::Error;

use crate::datasets::netpbm::NetpbmError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: NetpbmError,
    },
    #[error(transparent)]
    Netpbm(#[from] NetpbmError),
    #[error("manifest {path}, line {line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("results {path}, line {line}: {detail}")]
    Results {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{0}")]
    Config(String),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
