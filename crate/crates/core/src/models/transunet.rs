use candle_core::{DType, Device, Module, Tensor};

use super::spec::TransformerSpec;
use super::unet::{Decoder, Encoder};
use crate::error::Result;
use crate::nn::{max_pool_2x2, Conv2d, ConvBlock, LayerNorm, Linear, MultiHeadAttention, ParamStore};

/// Pre-norm transformer layer with a 4x MLP.
#[derive(Debug, Clone)]
struct TransformerLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerLayer {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), dim, 4 * dim)?,
            fc2: Linear::new(ps, &format!("{name}.mlp.fc2"), 4 * dim, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + h)?)
    }
}

/// Fixed 2D sine/cosine position encoding, `[1, gh*gw, dim]`.
pub(crate) fn position_encoding(gh: usize, gw: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let quarter = dim / 4;
    let mut values = Vec::with_capacity(gh * gw * dim);
    for r in 0..gh {
        for c in 0..gw {
            for pos in [r as f64, c as f64] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    values.push((pos * omega).sin());
                }
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    values.push((pos * omega).cos());
                }
            }
        }
    }
    Ok(Tensor::from_vec(values, (1, gh * gw, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// CNN encoder, transformer bottleneck over the stride-16 feature grid,
/// U-Net decoder with skips.
#[derive(Debug, Clone)]
pub(crate) struct TransUNetLite {
    encoder: Encoder,
    embed: Conv2d,
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
    bottleneck: ConvBlock,
    decoder: Decoder,
    head: Conv2d,
    patch: usize,
    embed_dim: usize,
}

impl TransUNetLite {
    pub fn new(
        ps: &mut ParamStore,
        in_channels: usize,
        channels: &[usize],
        num_classes: usize,
        groups: Option<usize>,
        t: &TransformerSpec,
    ) -> Result<Self> {
        let depth = channels.len();
        let encoder = Encoder::new(ps, in_channels, &channels[..depth - 1], groups)?;
        let embed = Conv2d::new(ps, "transformer.embed", channels[depth - 2], t.embed_dim, t.patch, 0, true)?
            .with_stride(t.patch);
        let layers = (0..t.layers)
            .map(|i| TransformerLayer::new(ps, &format!("transformer.layer{i}"), t.embed_dim, t.heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(ps, "transformer.norm", t.embed_dim)?;
        let bottleneck = ConvBlock::new(ps, "bottleneck", t.embed_dim, channels[depth - 1], groups)?;
        let decoder = Decoder::new(ps, channels, groups)?;
        let head = Conv2d::new(ps, "head", channels[0], num_classes, 1, 0, true)?;
        Ok(Self { encoder, embed, layers, norm, bottleneck, decoder, head, patch: t.patch, embed_dim: t.embed_dim })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.encoder.forward(x)?;
        let pooled = max_pool_2x2(feats.last().expect("encoder has stages"))?;
        let (b, _, h, w) = pooled.dims4()?;
        let grid = self.embed.forward(&pooled)?;
        let (_, e, gh, gw) = grid.dims4()?;
        let mut tokens = grid.flatten_from(2)?.transpose(1, 2)?;
        tokens = tokens.broadcast_add(&position_encoding(gh, gw, self.embed_dim, x.dtype())?)?;
        for layer in &self.layers {
            tokens = layer.forward(&tokens)?;
        }
        let tokens = self.norm.forward(&tokens)?;
        let mut grid = tokens.transpose(1, 2)?.reshape((b, e, gh, gw))?;
        if self.patch > 1 {
            grid = grid.upsample_nearest2d(h, w)?;
        }
        let bottom = self.bottleneck.forward(&grid)?;
        let y = self.decoder.forward(bottom, &feats, |_, skip, _| Ok(skip.clone()))?;
        Ok(self.head.forward(&y)?)
    }
}
