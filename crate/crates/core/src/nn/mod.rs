//! Neural-network building blocks on top of candle.

pub mod attention;
pub mod conv;
pub mod layers;
pub mod params;
pub mod spectral;

pub use attention::{attend, MultiHeadAttention, Rotary, SelfAttentionBlock};
pub use layers::{
    gelu, leaky_relu, length_mask, pad_time, softplus, BatchNorm, Conv1d, ConvNeXtBlock,
    DepthwiseConv, LayerNorm, Linear, Mode, PRelu, Padding,
};
pub use params::{Init, ParamStore, Scope};
pub use spectral::Stft;
