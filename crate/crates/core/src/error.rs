use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("integration failed at t = {t}: step size {h:e} underflowed")]
    IntegrationFailure { t: f64, h: f64 },

    #[error("series of length {len} is shorter than the delay count {delays}")]
    SeriesTooShort { len: usize, delays: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("kernel value {value:e} at ({row}, {col}) is not positive")]
    NonPositiveKernel { row: usize, col: usize, value: f64 },

    #[error(
        "eigensolver did not converge after {restarts} restarts (max residual {max_residual:e})"
    )]
    NonConvergence {
        restarts: usize,
        max_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("frequency grid is empty")]
    EmptyGrid,

    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("basis cache: {0}")]
    Cache(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
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

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics rather than of the inputs or environment.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::IntegrationFailure { .. }
            | Error::DegenerateData(_)
            | Error::NonPositiveKernel { .. }
            | Error::NonConvergence { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
