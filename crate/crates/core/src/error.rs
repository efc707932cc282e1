//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Two tensors or maps that must agree in shape do not.
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A file or byte stream does not follow the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// A numeric computation failed (divergence, NaN, singular matrix).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn shape_mismatch(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        CoreError::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
