use std::path::PathBuf;

/// Errors raised by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical overflow: {0}")]
    Overflow(String),

    #[error("quadrature did not converge after {intervals} intervals (estimated error {error:.3e})")]
    QuadratureNonConvergence { intervals: usize, error: f64 },

    #[error("no accountant order produced a finite value: {0}")]
    EmptyCurve(String),

    #[error("bracket failure: {0}")]
    Bracket(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing trace for {0}")]
    MissingTrace(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("step rejected after {attempts} loss-scale backoffs (scale {scale:e})")]
    RejectedStep { attempts: usize, scale: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of a numerical routine (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Overflow(_)
                | Error::QuadratureNonConvergence { .. }
                | Error::EmptyCurve(_)
                | Error::Bracket(_)
                | Error::RejectedStep { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Csv(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
