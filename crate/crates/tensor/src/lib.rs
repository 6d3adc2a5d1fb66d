//! Dense rank-4 tensors and a tape-based reverse-mode autodiff engine with
//! the primitives a convolutional encoder–decoder needs: grouped
//! convolution, batch norm, pooling, bilinear upsampling, attention gates
//! and the straight-through / codebook ops used by vector quantization.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::ConvSpec;
pub use ops::pool::{Axis, Reduce};
pub use tape::{BatchStats, Tape, Var};
pub use tensor::{Real, Shape, Tensor};
