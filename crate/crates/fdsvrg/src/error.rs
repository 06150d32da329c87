use std::path::PathBuf;

use fdsvrg_core::error::{AnalysisError, CommError, DataError, RunError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Libsvm { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("optimum unavailable: {0}")]
    Optimum(String),
    #[error("speedup report needs a run with one worker")]
    MissingBaseline,
    #[error("worker thread panicked")]
    Panic,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an I/O failure with the path it concerns.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
