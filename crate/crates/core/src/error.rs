use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite loss at step {step} (lr {lr:.3e}); residual magnitudes per layer: {residuals:?}")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        residuals: Vec<f64>,
    },

    #[error("gradient check: {0}")]
    Harness(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Config and data problems map to exit code 2, everything else to 1.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Data(_) | Error::Format(_))
    }
}
