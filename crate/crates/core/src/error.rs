use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("spike constraint violated at ({row}, {factor}): z = 0 but l = {value}")]
    SpikeViolation { row: usize, factor: usize, value: f64 },

    #[error("precision matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("simulation could not produce a feature with nonzero signal variance at row {row} after {attempts} attempts")]
    DegenerateSignal { row: usize, attempts: usize },

    #[error("ELBO became non-finite at sweep {sweep}")]
    NonFiniteElbo { sweep: usize },

    #[error("gibbs iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// True when the error stems from bad input (files, parameters, shapes)
    /// rather than a failure during computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Dimension(_)
            | Error::InvalidParameter(_)
            | Error::InvalidData(_)
            | Error::SpikeViolation { .. }
            | Error::Parse { .. }
            | Error::Json { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Stage { source, .. } | Error::Iteration { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
