use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),

    #[error("no grouping preset for K={0}")]
    UnsupportedPreset(usize),

    #[error("no target person: empty candidate list")]
    NoTarget,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range 0..={max}")]
    InvalidLabel { label: usize, max: usize },

    #[error("batch contains a single identity, no negatives to mine")]
    NoNegatives,

    #[error("no query with a valid positive, evaluation is empty")]
    EmptyEvaluation,

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("non-finite loss at epoch {epoch} step {step}, batch indices {indices:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        indices: Vec<usize>,
    },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config encode error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
