//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum MgaError {
    #[error("near-zero norm in {context} (row {row:?})")]
    NearZeroNorm { context: String, row: Option<usize> },

    #[error("softmax temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("degenerate token for cluster {cluster}: pre-normalization residual sum below epsilon")]
    DegenerateToken { cluster: usize },

    #[error("bad magic bytes: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    #[error("unsupported file version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),

    #[error("invalid synthetic spec field {field}: {reason}")]
    SpecInvalid { field: String, reason: String },

    #[error("invalid train config field {field}: {reason}")]
    ConfigInvalid { field: String, reason: String },

    #[error("checkpoint does not match the supplied train config")]
    CheckpointConfigMismatch,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("no center for class {0}")]
    MissingCenter(usize),

    #[error("need at least {needed} classes with >= {per_class} train images, found {found}")]
    InsufficientClasses {
        needed: usize,
        per_class: usize,
        found: usize,
    },

    #[error("class {class} has only {found} train images, need {needed}")]
    InsufficientImages {
        class: usize,
        needed: usize,
        found: usize,
    },

    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),

    #[error("candidate {0:?} not present in gallery index")]
    UnknownCandidate(String),

    #[error("record {0:?} is missing layer {1}")]
    MissingLayer(String, String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MgaError>;
