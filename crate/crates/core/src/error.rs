use std::path::PathBuf;

use crate::lm::vocab::VocabError;
use crate::metrics::MetricsError;
use crate::scenes::dataset::DatasetError;
use crate::tensor::TensorError;

/// Errors surfaced by the high-level pipeline (training, evaluation,
/// checkpoints, commands).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical check failed: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
