use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: expected shape {expected:?}, got {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },

    #[error("class index {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("address out of range: {0}")]
    OutOfRange(String),

    #[error("embedding capacity exceeded: {needed} kernels into a host with {available}")]
    Capacity { needed: usize, available: usize },

    #[error("suspect has {found} conv kernels but the embedding expects {expected}; restore the suspect first")]
    KernelCountMismatch { expected: usize, found: usize },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("layer {layer} uses a non-ReLU activation")]
    NonRelu { layer: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while decoding model, record or IDX files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("non-finite parameter at float index {0}")]
    NonFinite(usize),
    #[error("corrupt data: {0}")]
    Corrupt(String),
}
