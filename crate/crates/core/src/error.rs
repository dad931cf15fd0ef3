use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("token id {id} at position {pos} is outside the vocabulary (size {vocab})")]
    Vocab { id: usize, pos: usize, vocab: usize },

    #[error("{what} index {index} out of range (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("function is not deterministic: two evaluations gave {first:e} and {second:e}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for failures caused by numerics rather than by configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteGrad(_)
                | Error::NonDeterministic { .. }
                | Error::GradCheck(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
