use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("reuse violation: {0}")]
    ReuseViolation(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Training { step: usize, loss: f32 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("search budget exceeded: {0}")]
    Budget(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
