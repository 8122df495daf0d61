use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("label {index} out of range for {classes} classes")]
    Label { index: usize, classes: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (components: {components:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        components: Vec<f64>,
    },

    #[error("checkpoint {field}: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
