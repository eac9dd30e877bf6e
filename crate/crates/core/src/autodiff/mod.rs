//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod checkpoint;
mod gradcheck;
pub mod layers;
pub mod linalg;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{
    log_softmax, softmax, spatial_soft_argmax, ConvGeometry, CustomBackward, Tape, Var,
};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("slice {start}..{end} out of range for last axis of length {len}")]
    InvalidSlice {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("class index {index} out of range for {classes} classes")]
    InvalidClass { index: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
