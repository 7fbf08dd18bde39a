//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Covers exactly the operations the attention stack needs: matrix products,
//! masked row softmax, layer norm, the activation functions, prefix sums, and
//! the positional-bias kernels. Everything is generic over [`Scalar`] so the
//! same graph runs in `f32` for training and `f64` for oracle comparisons.

mod gradcheck;
pub mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Mask, PairOut, Tape, Var};
pub use tensor::Tensor;
