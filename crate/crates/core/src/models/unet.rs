use candle_core::{Module, Tensor};

use crate::error::Result;
use crate::nn::{max_pool_2x2, Conv2d, ConvBlock, ParamStore, UpConv2x2};

/// Stack of conv blocks with 2x2 max pooling between consecutive blocks.
#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    blocks: Vec<ConvBlock>,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, in_channels: usize, channels: &[usize], groups: Option<usize>) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            blocks.push(ConvBlock::new(ps, &format!("encoder.block{i}"), cin, c, groups)?);
            cin = c;
        }
        Ok(Self { blocks })
    }

    /// Output of every block, from full resolution down.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats: Vec<Tensor> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let input = if i == 0 { x.clone() } else { max_pool_2x2(&feats[i - 1])? };
            feats.push(block.forward(&input)?);
        }
        Ok(feats)
    }
}

/// Up-convolution, skip concatenation and conv block per level.
#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    ups: Vec<UpConv2x2>,
    blocks: Vec<ConvBlock>,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, channels: &[usize], groups: Option<usize>) -> Result<Self> {
        let levels = channels.len() - 1;
        let mut ups = Vec::with_capacity(levels);
        let mut blocks = Vec::with_capacity(levels);
        for i in 0..levels {
            ups.push(UpConv2x2::new(ps, &format!("decoder.up{i}"), channels[i + 1], channels[i])?);
            blocks.push(ConvBlock::new(ps, &format!("decoder.block{i}"), 2 * channels[i], channels[i], groups)?);
        }
        Ok(Self { ups, blocks })
    }

    /// `skip_fn(level, skip, upsampled)` may reweight each skip before concatenation.
    pub fn forward(
        &self,
        bottom: Tensor,
        skips: &[Tensor],
        mut skip_fn: impl FnMut(usize, &Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let mut x = bottom;
        for i in (0..self.ups.len()).rev() {
            let up = self.ups[i].forward(&x)?;
            let skip = skip_fn(i, &skips[i], &up)?;
            x = self.blocks[i].forward(&Tensor::cat(&[&skip, &up], 1)?)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct UNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Conv2d,
}

impl UNet {
    pub fn new(
        ps: &mut ParamStore,
        in_channels: usize,
        channels: &[usize],
        num_classes: usize,
        groups: Option<usize>,
    ) -> Result<Self> {
        let encoder = Encoder::new(ps, in_channels, channels, groups)?;
        let decoder = Decoder::new(ps, channels, groups)?;
        let head = Conv2d::new(ps, "head", channels[0], num_classes, 1, 0, true)?;
        Ok(Self { encoder, decoder, head })
    }

    pub fn forward_with(
        &self,
        x: &Tensor,
        skip_fn: impl FnMut(usize, &Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let mut feats = self.encoder.forward(x)?;
        let bottom = feats.pop().expect("at least two stages");
        let y = self.decoder.forward(bottom, &feats, skip_fn)?;
        Ok(self.head.forward(&y)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, |_, skip, _| Ok(skip.clone()))
    }
}
