use thiserror::Error;

/// Errors raised anywhere in the model, data and training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("masked softmax: row {row} has no unmasked position")]
    InvalidMask { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function is not deterministic: two evaluations differ by {0:e}")]
    NonDeterministic(f64),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("incompatible copy into {target}: expected {expected:?}, got {got:?}")]
    IncompatibleCopy {
        target: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
