use candle_core::{Module, Tensor, D};

use super::conv::conv2d;
use super::fused::{add_channel_bias, group_norm};
use super::params::ParamStore;
use crate::error::Result;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = ps.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], (6.0 / fan_in).sqrt())?;
        let bias = if bias { Some(ps.constant(&format!("{name}.bias"), &[cout], 0.0)?) } else { None };
        Ok(Self { weight, bias, stride: 1, pad })
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => add_channel_bias(&y, b),
            None => Ok(y),
        }
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2, doubling H and W.
#[derive(Debug, Clone)]
pub struct UpConv2x2 {
    weight: Tensor,
    bias: Tensor,
    cout: usize,
}

impl UpConv2x2 {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let bound = (6.0 / (cin * 4) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[cin, cout, 2, 2], bound)?;
        let bias = ps.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self { weight, bias, cout })
    }
}

impl Module for UpConv2x2 {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, cin, h, w) = x.dims4()?;
        let cols = x.permute((0, 2, 3, 1))?.reshape((b * h * w, cin))?;
        let y = cols.matmul(&self.weight.reshape((cin, self.cout * 4))?)?;
        let y = y
            .reshape((b, h, w, self.cout, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, self.cout, 2 * h, 2 * w))?;
        add_channel_bias(&y, &self.bias)
    }
}

/// Group normalization; the group count is `gcd(channels, groups)` so any width works.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            groups: gcd(channels, groups.max(1)),
            eps: 1e-5,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        group_norm(x, &self.gamma, &self.beta, self.groups, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[output, input], bound)?,
            bias: ps.constant(&format!("{name}.bias"), &[output], 0.0)?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Normalizes over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

/// Multi-head self-attention over `[B, N, D]` token sequences.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim)?,
            heads,
        })
    }
}

impl Module for MultiHeadAttention {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }
}

/// Two 3x3 convolutions, each followed by group norm and ReLU.
///
/// With `groups = None` the normalization is dropped and the convolutions
/// carry a bias instead.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv2d,
    norm1: Option<GroupNorm>,
    conv2: Conv2d,
    norm2: Option<GroupNorm>,
}

impl ConvBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, groups: Option<usize>) -> Result<Self> {
        let bias = groups.is_none();
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, bias)?;
        let norm1 = groups.map(|g| GroupNorm::new(ps, &format!("{name}.norm1"), cout, g)).transpose()?;
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, bias)?;
        let norm2 = groups.map(|g| GroupNorm::new(ps, &format!("{name}.norm2"), cout, g)).transpose()?;
        Ok(Self { conv1, norm1, conv2, norm2 })
    }
}

impl Module for ConvBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = self.conv1.forward(x)?;
        if let Some(n) = &self.norm1 {
            x = n.forward(&x)?;
        }
        let mut x = self.conv2.forward(&x.relu()?)?;
        if let Some(n) = &self.norm2 {
            x = n.forward(&x)?;
        }
        x.relu()
    }
}
