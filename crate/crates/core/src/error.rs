use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("value {value} is outside the open range of the activation")]
    OutOfRange { value: f64 },
    #[error("inversion did not converge (bracket exceeded |x| > {limit:e})")]
    NoConvergence { limit: f64 },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    RankDeficient { pivot: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, actual })
    }
}
