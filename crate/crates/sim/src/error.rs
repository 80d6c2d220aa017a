use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("generation: {0}")]
    Generation(String),
}

pub type Result<T> = std::result::Result<T, SimError>;
