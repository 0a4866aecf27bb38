use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ModelKind, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Group normalization; the group count is reduced to `gcd(channels, groups)`.
    Group { groups: usize },
    None,
}

impl NormKind {
    pub(crate) fn groups(self) -> Option<usize> {
        match self {
            NormKind::Group { groups } => Some(groups),
            NormKind::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub patch: usize,
    pub max_tokens: usize,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        Self { layers: 6, heads: 6, embed_dim: 384, patch: 1, max_tokens: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Width of each encoder stage; the last entry is the bottleneck.
    pub encoder_channels: Vec<usize>,
    pub norm: NormKind,
    pub transformer: Option<TransformerSpec>,
}

impl ModelSpec {
    pub const DEFAULT_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];

    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            in_channels: 1,
            num_classes: NUM_CLASSES,
            encoder_channels: Self::DEFAULT_CHANNELS.to_vec(),
            norm: NormKind::Group { groups: 8 },
            transformer: (kind == ModelKind::TransunetLite).then(TransformerSpec::default),
        }
    }

    pub fn with_channels(mut self, channels: &[usize]) -> Self {
        self.encoder_channels = channels.to_vec();
        self
    }

    pub fn with_transformer(mut self, t: TransformerSpec) -> Self {
        self.transformer = Some(t);
        self
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial downsampling between the input and the bottleneck.
    pub fn stride(&self) -> usize {
        1 << (self.depth() - 1)
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        match (self.kind, &self.transformer) {
            (ModelKind::TransunetLite, Some(t)) => self.stride() * t.patch,
            _ => self.stride(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.encoder_channels.len() < 2 {
            return bad("at least two encoder stages are required".into());
        }
        if self.encoder_channels[0] == 0 || self.encoder_channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("encoder channels {:?} must be strictly increasing", self.encoder_channels));
        }
        if let NormKind::Group { groups: 0 } = self.norm {
            return bad("group count must be positive".into());
        }
        if self.kind == ModelKind::TransunetLite {
            let Some(t) = &self.transformer else {
                return bad("transformer settings are required for TRANSUNET_LITE".into());
            };
            if t.layers == 0 || t.heads == 0 || t.patch == 0 || t.max_tokens == 0 {
                return bad("transformer layers, heads, patch and max_tokens must be positive".into());
            }
            if t.embed_dim % t.heads != 0 {
                return bad(format!("embed_dim {} not divisible by {} heads", t.embed_dim, t.heads));
            }
            if t.embed_dim % 4 != 0 {
                return bad(format!("embed_dim {} must be a multiple of 4", t.embed_dim));
            }
        }
        Ok(())
    }

    /// Checks an input shape `[B, C, H, W]` against the spec.
    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let &[_, c, h, w] = dims else {
            return Err(Error::ShapeMismatch { expected: vec![0, self.in_channels, 0, 0], actual: dims.to_vec() });
        };
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![dims[0], self.in_channels, h, w],
                actual: dims.to_vec(),
            });
        }
        let divisor = self.divisor();
        if h == 0 || w == 0 || h % divisor != 0 || w % divisor != 0 {
            return Err(Error::IndivisibleInput { height: h, width: w, divisor });
        }
        if let (ModelKind::TransunetLite, Some(t)) = (self.kind, &self.transformer) {
            let tokens = (h / divisor) * (w / divisor);
            if tokens > t.max_tokens {
                return Err(Error::TokenOverflow { tokens, limit: t.max_tokens });
            }
        }
        Ok(())
    }
}
