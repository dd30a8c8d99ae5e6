use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },

    #[error("node {node}: {message}")]
    NodeShape { node: usize, message: String },

    #[error("node {node}: non-finite value produced")]
    NonFinite { node: usize },

    #[error("leaf node {node} ({name}) has no binding")]
    UnboundLeaf { node: usize, name: String },

    #[error("backward requested before forward")]
    BackwardBeforeForward,

    #[error("invalid network spec at layer {layer}: {message}")]
    InvalidSpec { layer: usize, message: String },

    #[error("layer ordinal {ordinal} outside 1..={layers}")]
    OrdinalOutOfRange { ordinal: usize, layers: usize },

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("{0}: truncated file")]
    Truncated(&'static str),

    #[error("checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("idx: wrong magic number {found:#010x}, expected {expected:#010x}")]
    IdxMagic { expected: u32, found: u32 },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },

    #[error("csv: {0}")]
    Csv(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("lambda for layer {ordinal} is zero; the bound diverges")]
    ZeroLambda { ordinal: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
