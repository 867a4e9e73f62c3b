//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! Every op that consumes a tensor requiring a gradient records its inputs
//! and a vector-Jacobian product; [`Tensor::backward`] replays them in
//! reverse topological order. Tensors are immutable once created, only the
//! gradient buffers of leaves change.

pub mod element;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use ops::conv::{conv_out_len, deconv_out_len, ConvSpec, DeconvSpec};
pub use ops::norm::{BatchNormOutput, NormMode};
pub use ops::resize::{resize_taps, ResizeMode};
pub use tensor::{BackwardCtx, BackwardFn, Tensor};
