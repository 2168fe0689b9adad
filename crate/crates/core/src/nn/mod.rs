//! Minimal layer toolkit with hand-written backward passes.

pub mod init;
pub mod layers;
pub mod norm;
pub mod params;

pub use layers::{leaky_relu, leaky_relu_backward, relu, relu_backward, upsample_nearest, upsample_nearest_backward, Conv1d, Linear};
pub use norm::{ChannelStats, CondNorm, NormMode, NormTrace};
pub use params::{Gradients, ParamId, ParamStore, Tensor};
