use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index {index} out of bounds for axis of size {size} in {context}")]
    Index {
        context: &'static str,
        index: usize,
        size: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("tape contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("failed to load array {name}: {reason}")]
    Load { name: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
