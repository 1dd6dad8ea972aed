use thiserror::Error;

pub type Result<T> = std::result::Result<T, MkaError>;

#[derive(Debug, Error)]
pub enum MkaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tensor shape {shape:?} holds {expected} elements but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },

    #[error("invalid dimensions: {0}")]
    Dims(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate normalizer at query row {row}: no positively weighted keys")]
    DegenerateDenominator { row: usize },

    #[error("routing weights at row {row} are not on the simplex: {detail}")]
    NotSimplex { row: usize, detail: String },

    #[error("operation requires a differentiable routing policy, got {0}")]
    NotDifferentiable(String),

    #[error("finite-difference check failed: {0}")]
    FiniteDifference(String),

    #[error("cache mismatch: {0}")]
    Cache(String),

    #[error("chunk store: {0}")]
    Store(String),

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MkaError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MkaError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
