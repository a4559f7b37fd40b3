//! Minimal layer toolkit: parameter store, activations and the handful of
//! layers the denoiser needs, each with an explicit backward pass.

mod layers;
mod params;

pub use layers::{
    silu, silu_backward, upsample2x, upsample2x_backward, Act, AttentionCache, Conv2d, GroupNorm, GroupNormCache,
    Linear, SelfAttention, GROUP_NORM_EPS,
};
pub use params::{Init, ParamId, Params};
