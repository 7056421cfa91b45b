use thiserror::Error;

use crate::splitting::Trajectory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("newton did not converge after {iterations} iterations (residual history {history:?})")]
    NewtonDiverged { iterations: usize, history: Vec<f64> },

    #[error("power iteration did not converge in {iterations} iterations (best estimate {estimate})")]
    PowerIteration { iterations: usize, estimate: f64 },

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        partial: Box<Trajectory>,
        source: Box<Error>,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Factorization(_)
            | Error::NewtonDiverged { .. }
            | Error::PowerIteration { .. }
            | Error::NonFinite { .. } => true,
            Error::StepFailed { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
