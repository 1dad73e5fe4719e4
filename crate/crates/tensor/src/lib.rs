//! Dense-tensor numerics with reverse-mode automatic differentiation.
//!
//! This crate is the substrate the rest of the workspace trains on: a
//! row-major [`Tensor`] value type, a [`Tape`] that records forward
//! operations and replays them in reverse to accumulate gradients, and a
//! finite-difference [`gradient_check`] used by the test suites.
//!
//! Design constraints:
//!
//! - f32 for training, f64 for gradient verification (pick via the
//!   [`Scalar`] type parameter).
//! - No implicit broadcasting beyond scalar `scale`/`add_scalar`; shape
//!   mismatches are hard errors.
//! - Only "valid" convolution; transposed convolution returns the full
//!   `(H-1)*stride + k` output and callers crop explicitly.
//! - Forward ops are pure and eager; every op checks its output for
//!   non-finite values and reports them as errors rather than letting
//!   NaN propagate into a training run.

mod conv;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, CheckResult};
pub use scalar::Scalar;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward on a graph with no differentiable leaves")]
    DetachedGraph,
}

pub type Result<T> = std::result::Result<T, TensorError>;
