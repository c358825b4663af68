use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("index {index} outside {range}")]
    IndexOutOfRange { index: usize, range: IndexRange },

    #[error("invalid `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate operator: {0}")]
    DegenerateOperator(String),

    #[error("estimator diverged at iteration {iteration}: {quantity} = {value}")]
    Divergence {
        iteration: usize,
        quantity: &'static str,
        value: f64,
    },

    #[error("not enough samples for a stable estimate: {got} < {required}")]
    InsufficientSamples { got: usize, required: usize },

    #[error("reference channel has zero energy")]
    ZeroReference,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Closed integer interval used in index errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexRange {
    pub lo: usize,
    pub hi: usize,
}

impl fmt::Display for IndexRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_shape<T: nalgebra::Scalar>(
    context: &'static str,
    m: &nalgebra::DMatrix<T>,
    expected: (usize, usize),
) -> Result<()> {
    if m.shape() == expected {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            context,
            expected,
            actual: m.shape(),
        })
    }
}
