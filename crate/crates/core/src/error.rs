use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("factor shape mismatch at {location}: expected {expected:?}, got {actual:?}")]
    Factor {
        location: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{path}: {message}")]
    Json { path: String, message: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Config(_)
                | Error::Factor { .. }
                | Error::Json { .. }
                | Error::Format(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
