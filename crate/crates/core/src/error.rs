use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("incompatible normal data: boundary integral {0:e} exceeds tolerance")]
    Incompatible(f64),
    #[error("linear solve failed: {0}")]
    Singular(String),
    #[error("eigensolver: {0}")]
    Eigen(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("numerical blow-up at step {step}: |u| = {norm:e} exceeds ceiling {ceiling:e}")]
    BlowUp {
        step: usize,
        norm: f64,
        ceiling: f64,
    },
    #[error("noise assumption violated: {0}")]
    Assumption(String),
    #[error("regression conditioning failure at step {step}: {reason}")]
    Regression { step: usize, reason: String },
    #[error("mismatched grids: {0}")]
    Mismatch(String),
    #[error("optimizer aborted: {0}")]
    Optimizer(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
