use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph has already been backpropagated")]
    AlreadyBackpropagated,

    #[error("action index {index} out of range for {size} actions")]
    ActionOutOfRange { index: usize, size: usize },

    #[error("module expects width {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("tabular policies key on (meta, depth) but the state carries no meta label")]
    MissingMeta,

    #[error("unknown meta label {0}")]
    UnknownMeta(usize),

    #[error("no module bank for depth {0}")]
    EmptyBank(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric abort at step {step} (path {path}): {reason}")]
    NumericAbort { step: usize, path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures caused by non-finite numbers during training.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::NumericAbort { .. }
        )
    }
}
