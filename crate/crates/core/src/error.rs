use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape did not match what an op expects on a specific axis.
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: degenerate batch ({count} values per channel, need at least 2)")]
    DegenerateBatch { op: &'static str, count: usize },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity reached a loss term or an optimizer update.
    #[error("poisoned state: non-finite value in {term}")]
    PoisonedState { term: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("factor pool exhausted: need {needed} candidates, pool has {available}")]
    PoolExhausted { needed: usize, available: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("undefined conditional: {0}")]
    UndefinedConditional(String),

    #[error("missing capability: {0}")]
    Capability(String),

    /// Configuration rejected; `field` is the dotted path of the offending key.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user input rather than by running the computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
