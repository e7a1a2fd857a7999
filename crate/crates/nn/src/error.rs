use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },
    #[error("invalid layer spec at index {layer}: {detail}")]
    Spec { layer: usize, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("activations do not belong to this model: {0}")]
    Mismatch(String),
    #[error("model file corrupt at byte {pos}: {detail}")]
    Corrupt { pos: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
