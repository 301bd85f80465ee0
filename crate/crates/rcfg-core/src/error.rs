use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain: {0}")]
    Domain(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("model: {0}")]
    Model(String),

    #[error("reward: {0}")]
    Reward(String),

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("guidance: {0}")]
    Guidance(String),

    #[error("train_rl: {0}")]
    TrainRl(String),

    #[error("distill: {0}")]
    Distill(String),

    #[error("harness: {0}")]
    Harness(String),

    #[error("parse: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
