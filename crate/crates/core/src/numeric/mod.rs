//! Dense `f64` tensors, a reverse-mode autodiff tape, Adam, finite-difference
//! gradient checking and the checkpoint container.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{paths as checkpoint_paths, Checkpoint, CheckpointError, Manifest, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, gradient_check_params, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{adam_step, Adam, ParamId, ParamStore};
pub use tensor::{Csr, Tensor};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        shape: Vec<usize>,
    },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("parameter {0} missing")]
    MissingParam(String),
    #[error("optimizer step without gradients")]
    MissingGradients,
}
