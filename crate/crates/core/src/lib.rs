//! Context-aware additive positional biases (CABLE) and the positional-encoding
//! zoo around them, on a small CPU transformer stack.
//!
//! The crate is generic over the floating-point type; the aliases below pin
//! the two precisions the toolkit uses: `f32` for training and evaluation,
//! `f64` for gradient audits and oracle comparisons.

pub mod attn;
pub mod data;
mod error;
pub mod evalx;
pub mod model;
pub mod numcore;
pub mod posenc;
pub mod train;

pub use error::{Error, Result};
pub use numcore::{Scalar, Tape, Tensor, Var};

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type Tape32 = numcore::Tape<f32>;
pub type Tape64 = numcore::Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type AttentionLayer32 = attn::AttentionLayer<f32>;
pub type AttentionLayer64 = attn::AttentionLayer<f64>;
