use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("output extent along {axis} is not an integer: ({size} + 2*{padding} - {kernel}) / {stride}")]
    NonIntegerExtent {
        axis: &'static str,
        size: usize,
        padding: usize,
        kernel: usize,
        stride: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
