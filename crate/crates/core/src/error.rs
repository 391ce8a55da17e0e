use thiserror::Error;

/// Errors surfaced by the separation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid depth: {0}")]
    Depth(String),

    #[error("zero-energy reference signal")]
    ZeroEnergyReference,

    #[error("permutation search supports at most 8 sources, got {0}")]
    TooManySources(usize),

    #[error("non-finite activations detected in {stage}")]
    NonFinite { stage: &'static str },

    #[error("loss term '{term}' requires collected intermediates")]
    MissingIntermediates { term: &'static str },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
