use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },

    #[error("data length {got} does not match shape element count {expected}")]
    DataLength { expected: usize, got: usize },

    #[error("element {index} has value {value}, expected exactly -1 or +1")]
    NonBinaryValue { index: usize, value: f64 },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("channel mismatch: tensor has {tensor} channels, parameters have {params}")]
    ChannelMismatch { tensor: usize, params: usize },

    #[error("surrogate sharpness must be positive, got {0}")]
    NonPositiveAlpha(f64),

    #[error("tensor is empty")]
    EmptyTensor,

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("convolution geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("MulBiconv stack has {stack} stages but N = {n}")]
    StackLengthMismatch { stack: usize, n: usize },

    #[error("MulBiconv stages must use 1x1 kernels, found {0}x{0}")]
    KernelNotOne(usize),

    #[error("shape {dims:?} is not divisible as required by {module}")]
    IndivisibleShape { dims: Vec<usize>, module: &'static str },

    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("kernel size {0} is not supported (expected 1 or 3)")]
    InvalidKernel(usize),

    #[error("grid {dims:?} too small (every dimension must be at least 4)")]
    GridTooSmall { dims: [usize; 3] },

    #[error("channel plan mismatch: {0}")]
    ChannelPlanMismatch(String),

    #[error("label {label} out of range for {n_class} classes")]
    LabelOutOfRange { label: usize, n_class: usize },

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
