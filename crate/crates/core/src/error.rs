use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("probability row {row} sums to {sum}, expected 1")]
    Normalization { row: usize, sum: f64 },

    #[error("non-finite gradient in parameter block `{block}`")]
    Divergence { block: String },

    #[error("non-finite loss during {context}")]
    NonFiniteLoss { context: String },

    #[error("invalid usage: {0}")]
    Usage(String),

    #[error("cannot estimate label distribution: {0}")]
    Estimation(String),

    #[error("class {class} needs {needed} samples but only {available} are available (short by {shortfall})")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
        shortfall: usize,
    },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("class {class} has no samples in the evaluation set")]
    EmptyClass { class: usize },

    #[error("table error: {0}")]
    Table(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
