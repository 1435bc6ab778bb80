use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image decode failed ({len}-byte stream{}): {message}", offset.map(|o| format!(", near byte {o}")).unwrap_or_default())]
    Decode {
        len: usize,
        offset: Option<usize>,
        message: String,
    },

    #[error("image encode failed: {0}")]
    Encode(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("affine transform is not invertible (determinant {0})")]
    NotInvertible(f64),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend timed out after {0:.1}s")]
    Timeout(f64),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("no anchors found for {0}")]
    NoAnchors(String),

    #[error("no candidates: {0}")]
    NoCandidates(String),

    #[error("new-area ratio {best:.3} not within [{min:.2}, {max:.2}] after {attempts} attempts")]
    RatioUnreachable {
        best: f64,
        min: f64,
        max: f64,
        attempts: usize,
    },

    #[error("solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
