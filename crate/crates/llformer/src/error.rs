use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between tensors handed to an op.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An op precondition other than shape was violated.
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Model or training configuration rejected; every violation is listed.
    #[error("invalid config:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// Unsupported or malformed image data.
    #[error("image format: {0}")]
    Format(String),

    /// Manifest problems, collected so the user sees all of them at once.
    #[error("manifest:\n{}", .0.join("\n"))]
    Manifest(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    /// Training produced a non-finite loss; the step index says where.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found}, expected {expected}")]
    Version { expected: u32, found: u32 },

    #[error("file truncated while reading {section}")]
    Truncated { section: &'static str },

    #[error("weight count {found} does not match config ({expected})")]
    WeightCount { expected: u64, found: u64 },

    #[error("config header: {0}")]
    Config(String),
}
