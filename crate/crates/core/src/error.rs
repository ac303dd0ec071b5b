use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty payload: {0}")]
    EmptyPayload(String),

    #[error("identity slot {slot} out of range 1..={max}")]
    SlotOutOfRange { slot: usize, max: usize },

    #[error("reference of {len} tokens exceeds the maximum length {max}")]
    ReferenceTooLong { len: usize, max: usize },

    #[error("non-uniform image dimensions: {0}")]
    NonUniformImages(String),

    #[error("head dimension {head_dim} not divisible into even rotary parts {parts:?}")]
    IndivisibleHead { head_dim: usize, parts: [usize; 3] },

    #[error("no noisy tokens to denoise")]
    NothingToDenoise,

    #[error("timestep {0} outside [0, 1]")]
    TimestepOutOfRange(f64),

    #[error("embedding {id} is not unit-norm (norm {norm})")]
    NonUnitEmbedding { id: String, norm: f64 },

    #[error("overlapping regions: {0}")]
    OverlappingRegions(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("bad container: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
