//! Precipitation nowcasting with a compact attention UNet: depthwise-separable
//! and mixed-kernel convolution blocks, CBAM attention, and an optional
//! vector-quantized bottleneck.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;
pub mod tune;
pub mod vq;

pub use config::RunConfig;
pub use error::{Error, FormatError, Result};
pub use model::{ForwardOutput, Model, ModelConfig, ParamCount, Variant, VqConfig};
pub use params::{BufferStore, Graph, Mode, ParamStore};
pub use vq::{Codebook, VqNormalization};
