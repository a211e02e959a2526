//! Dense tensors and a reverse-mode tape.
//!
//! Every operation the recurrent cell needs is recorded on a [`Tape`]; a
//! single reverse sweep from a scalar loss accumulates gradients into the
//! [`ParamStore`] bound to that tape. Gradients accumulate (add-into), which
//! is what makes parameters shared across time steps sum correctly under
//! backpropagation through time.
//!
//! Broadcasting is limited to scalar-with-tensor.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport};
pub use tape::{ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter `{0}` does not influence the loss")]
    DisconnectedParameter(String),
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
}
