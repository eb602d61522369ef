//! A small dense-tensor training kit: `f32` tensors, layers with explicit
//! reverse passes, Adam, spectral normalization and weight snapshots.
//!
//! There is no general autodiff graph. Each [`Layer`] caches its inputs in
//! `forward` and returns the input gradient from `backward`, accumulating
//! parameter gradients as a side effect. Networks chain layers by hand.

mod adam;
mod blocks;
mod layers;
mod snapshot;
mod spectral;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use blocks::{ChannelGate, DepthwiseSeparable, InvertedBottleneck, GATE_REDUCTION};
pub use layers::{
    add_backward, add_forward, he_std, sigmoid, BatchNorm2d, Conv2d, ConvGeometry, Flatten,
    GlobalAvgPool, Identity, Layer, Linear, PRelu, PixelShuffle, Relu, Sigmoid, PRELU_INIT,
};
pub use snapshot::{WeightSnapshot, SNAPSHOT_FORMAT, SNAPSHOT_VERSION};
pub use spectral::{spectral_normalize, PowerIteration};
pub use tensor::{Param, Tensor};
