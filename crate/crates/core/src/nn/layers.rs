use candle_core::{Tensor, D};

use super::conv::conv2d;
use super::norm::{GroupNormOp, Standardize};
use super::params::{Init, ParamBuilder};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// `k×k` convolution with "same" padding for odd `k`.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }
}

impl Conv2d {
    pub fn new(spec: ConvSpec, pb: &ParamBuilder) -> Result<Self> {
        Self::with_init(spec, pb, None)
    }

    /// Like [`Conv2d::new`] but with an explicit weight initializer.
    pub fn with_init(spec: ConvSpec, pb: &ParamBuilder, init: Option<Init>) -> Result<Self> {
        let cg = spec.in_channels / spec.groups;
        let fan_in = cg * spec.kernel * spec.kernel;
        let weight = pb.get(
            "weight",
            &[spec.out_channels, cg, spec.kernel, spec.kernel],
            init.unwrap_or(Init::Kaiming { fan_in }),
        )?;
        let bias = if spec.bias {
            Some(pb.get("bias", &[spec.out_channels], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding, self.groups)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Group normalization over `(B, C, H, W)` with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize, pb: &ParamBuilder) -> Result<Self> {
        Self::with_gain(channels, groups, 1.0, pb)
    }

    /// `gain` sets the initial scale; zero makes a residual branch start as identity.
    pub fn with_gain(channels: usize, groups: usize, gain: f64, pb: &ParamBuilder) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(crate::Error::Config(format!(
                "group norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            weight: pb.get("weight", &[channels], Init::Const(gain))?,
            bias: pb.get("bias", &[channels], Init::Const(0.0))?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let op = GroupNormOp {
            groups: self.groups,
            eps: self.eps,
        };
        Ok(x.contiguous()?.apply_op3(&self.weight, &self.bias, op)?)
    }
}

/// Number of groups used for a channel count: 8 when it divides, else 1.
pub fn norm_groups(channels: usize) -> usize {
    if channels % 8 == 0 {
        8
    } else {
        1
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, pb: &ParamBuilder) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Self {
            weight: pb.get("weight", &[outputs, inputs], Init::Uniform { bound })?,
            bias: pb.get("bias", &[outputs], Init::Uniform { bound })?,
        })
    }

    /// Applies to the last dimension of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.weight.t()?)?,
            _ => {
                let dims = x.dims().to_vec();
                let last = dims[dims.len() - 1];
                let flat = x.reshape(((), last))?.matmul(&self.weight.t()?)?;
                let mut out = dims;
                let n = out.len();
                out[n - 1] = self.weight.dim(0)?;
                flat.reshape(out)?
            }
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, pb: &ParamBuilder) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", &[dim], Init::Const(1.0))?,
            bias: pb.get("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = x.contiguous()?.apply_op1(Standardize {
            group: x.dim(D::Minus1)?,
            eps: self.eps,
        })?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Multi-head self-attention over `(B, N, D)` tokens.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(dim: usize, heads: usize, pb: &ParamBuilder) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(dim, 3 * dim, &pb.pp("qkv"))?,
            proj: Linear::new(dim, dim, &pb.pp("proj"))?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?.reshape((b * self.heads, n, hd))?;
        let k = qkv.get(1)?.contiguous()?.reshape((b * self.heads, n, hd))?;
        let v = qkv.get(2)?.contiguous()?.reshape((b * self.heads, n, hd))?;
        let scale = 1.0 / (hd as f64).sqrt();
        let att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let att = candle_nn::ops::softmax_last_dim(&att)?;
        let y = att
            .matmul(&v)?
            .reshape((b, self.heads, n, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        self.proj.forward(&y)
    }
}
