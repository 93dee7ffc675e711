//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are inconsistent with the operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Dim { op: &'static str, detail: String },

    /// Softmax asked to normalize over an empty support.
    #[error("softmax support is empty (all positions masked)")]
    EmptySupport,

    /// Math domain violation (log of a nonpositive value, etc.).
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation that needs at least one timestep got none.
    #[error("empty sequence")]
    EmptySequence,

    /// A scalar hyperparameter is outside its legal range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Span indices fall outside their passage.
    #[error("span out of range: {0}")]
    Bounds(String),

    /// A corpus line is not valid JSON.
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A corpus line is valid JSON but missing or mistyping a field.
    #[error("{path}:{line}: missing or invalid field `{field}`")]
    Schema {
        path: String,
        line: usize,
        field: String,
    },

    /// A configuration value is unusable.
    #[error("invalid config: {0}")]
    Config(String),

    /// A passage offers fewer valid spans than the number requested.
    #[error("degenerate passage: {needed} spans requested, {available} available")]
    DegeneratePassage { needed: usize, available: usize },

    /// Exhaustive enumeration would exceed the configured budget.
    #[error("enumeration budget exceeded: {size} candidate sets > budget {budget}")]
    EnumerationBudget { size: usize, budget: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }
}
