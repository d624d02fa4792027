use thiserror::Error;

use crate::container::FormatError;
use crate::linalg::LinalgError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape { what: String, expected: (usize, usize), found: (usize, usize) },
    #[error("backward called without a recorded forward pass")]
    MissingCache,
    #[error("cholesky failed after regularization with lambda = {lambda:e}")]
    Regularization { lambda: f64, source: LinalgError },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Failures of the numerical kernels, as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Regularization { .. } => true,
            Error::Linalg(e) => matches!(
                e,
                LinalgError::NoConvergence { .. }
                    | LinalgError::NotPositiveDefinite { .. }
                    | LinalgError::NonFinite { .. }
            ),
            _ => false,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape { what: what.to_string(), expected: (expected, 1), found: (found, 1) })
    }
}

pub(crate) fn check_shape(
    what: impl FnOnce() -> String,
    expected: (usize, usize),
    found: (usize, usize),
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape { what: what(), expected, found })
    }
}
