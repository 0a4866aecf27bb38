//! Tensor building blocks: parameters, layers and the optimizer.

mod conv;
mod fused;
mod layers;
mod optim;
mod params;

pub use conv::conv2d;
pub use fused::{add_channel_bias, channel_sums, group_norm, max_pool_2x2};
pub use layers::{Conv2d, ConvBlock, GroupNorm, LayerNorm, Linear, MultiHeadAttention, UpConv2x2};
pub use optim::{clip_scale, global_grad_norm, Adam};
pub use params::ParamStore;
