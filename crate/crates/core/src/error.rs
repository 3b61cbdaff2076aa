use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("event index {index} out of range for a matrix with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("entry {index} is not an integer: {value}")]
    NonInteger { index: usize, value: f64 },

    #[error("invalid scale {0}: scales must be positive and finite")]
    InvalidScale(f64),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("KL divergence needs probability vectors: {0}")]
    NotAProbability(String),

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("scale training diverged at step {step} (lambda={lambda:e}): L_error {error:.4e} stayed above the divergence threshold (initial {initial:.4e})")]
    Diverged {
        step: usize,
        lambda: f64,
        error: f64,
        initial: f64,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(op: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            expected,
            actual,
        })
    }
}
