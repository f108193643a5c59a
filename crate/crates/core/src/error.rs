use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("tensor data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("condition vector has dim {got}, model has {expected} categories")]
    ConditionDim { expected: usize, got: usize },

    #[error("label {label} out of range for {n_categories} categories")]
    LabelOutOfRange { label: usize, n_categories: usize },

    #[error("forward cache does not match parameters: {0}")]
    StaleCache(String),

    #[error("idx parse error at byte offset {offset}: {msg}")]
    Idx { offset: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
