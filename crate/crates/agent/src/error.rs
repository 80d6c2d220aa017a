use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("data: {0}")]
    Data(String),
    #[error("dimension: {0}")]
    Dimension(String),
    #[error("range: {0}")]
    Range(String),
    #[error("state: {0}")]
    State(String),
    #[error("format: {0}")]
    Format(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] voxbc_tensor::TensorError),
    #[error(transparent)]
    Sim(#[from] voxbc_sim::SimError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

impl AgentError {
    pub fn io(path: &std::path::Path, e: std::io::Error) -> AgentError {
        AgentError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<serde_json::Error> for AgentError {
    fn from(e: serde_json::Error) -> AgentError {
        AgentError::Format(e.to_string())
    }
}
