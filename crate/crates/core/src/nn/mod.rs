//! Minimal CPU network toolkit on top of candle tensors: a fast grouped
//! convolution, seeded parameters, common layers and an SGD optimizer.

mod conv;
mod layers;
mod norm;
mod optim;
mod params;

pub use conv::conv2d;
pub use layers::{norm_groups, Conv2d, ConvSpec, GroupNorm, LayerNorm, Linear, SelfAttention};
pub use optim::{Optimizer, OptimizerKind, Sgd};
pub use params::{Init, ParamBuilder, ParamStore};
