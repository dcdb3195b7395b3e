use thiserror::Error;

/// Errors raised by the unlearning laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} outside 1..={horizon}")]
    TimestepOutOfRange { t: usize, horizon: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset too large for exhaustive evaluation: {size} points (limit {limit})")]
    GuardExceeded { size: usize, limit: usize },

    #[error("training diverged at step {step}: loss {loss} exceeded 10x the initial loss {initial} for {run} consecutive steps")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        run: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
