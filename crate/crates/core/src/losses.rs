//! Segmentation losses and sample-weighted batch aggregation.
//!
//! Every loss has a `_per_sample` form returning a `[B]` tensor so that
//! per-sample weights can be applied afterwards; the plain form is the mean.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelMap, LossKind, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossTerm {
    Ce,
    Dice,
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub terms: BTreeSet<LossTerm>,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_kind(LossKind::CeDice)
    }
}

impl LossConfig {
    pub fn for_kind(kind: LossKind) -> Self {
        let terms = match kind {
            LossKind::Ce => vec![LossTerm::Ce],
            LossKind::CeDice => vec![LossTerm::Ce, LossTerm::Dice],
            LossKind::CeDiceFocal => vec![LossTerm::Ce, LossTerm::Dice, LossTerm::Focal],
        };
        Self {
            terms: terms.into_iter().collect(),
            ce_weight: 1.0,
            dice_weight: 1.0,
            focal_weight: 1.0,
            focal_gamma: 2.0,
            dice_smooth: 1e-6,
        }
    }

    pub fn with_focal_gamma(mut self, gamma: f64) -> Self {
        self.focal_gamma = gamma;
        self
    }

    pub fn with_weights(mut self, ce: f64, dice: f64, focal: f64) -> Self {
        self.ce_weight = ce;
        self.dice_weight = dice;
        self.focal_weight = focal;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidConfig("loss needs at least one term".into()));
        }
        let weights = [self.ce_weight, self.dice_weight, self.focal_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights {weights:?} must be non-negative")));
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("focal gamma {} must be non-negative", self.focal_gamma)));
        }
        if !(self.dice_smooth.is_finite() && self.dice_smooth >= 0.0) {
            return Err(Error::InvalidConfig("dice smoothing must be non-negative".into()));
        }
        Ok(())
    }
}

/// Stacks label maps into a `[B, H, W]` u32 tensor.
pub fn labels_to_tensor(labels: &[LabelMap]) -> Result<Tensor> {
    let Some(first) = labels.first() else {
        return Err(Error::EmptyInput);
    };
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(labels.len() * h * w);
    for l in labels {
        if l.shape() != (h, w) {
            return Err(Error::ShapeMismatch { expected: vec![h, w], actual: vec![l.shape().0, l.shape().1] });
        }
        data.extend(l.labels().iter().map(|&v| v as u32));
    }
    Ok(Tensor::from_vec(data, (labels.len(), h, w), &Device::Cpu)?)
}

/// One-hot encoding `[B, C, H, W]` of a `[B, H, W]` index tensor.
pub fn one_hot(target: &Tensor, classes: usize, dtype: DType) -> Result<Tensor> {
    let (b, h, w) = target.dims3()?;
    let idx: Vec<u32> = target.to_dtype(DType::U32)?.flatten_all()?.to_vec1()?;
    let mut data = vec![0f64; b * classes * h * w];
    for (i, &c) in idx.iter().enumerate() {
        let (n, pix) = (i / (h * w), i % (h * w));
        data[(n * classes + c as usize) * h * w + pix] = 1.0;
    }
    Ok(Tensor::from_vec(data, (b, classes, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

fn check(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if target.dims() != [b, h, w] || c != NUM_CLASSES {
        return Err(Error::ShapeMismatch { expected: vec![b, NUM_CLASSES, h, w], actual: target.dims().to_vec() });
    }
    one_hot(target, c, logits.dtype())
}

/// Mean over each sample's pixels.
fn pixel_mean(per_pixel: &Tensor) -> Result<Tensor> {
    Ok(per_pixel.flatten_from(1)?.mean(1)?)
}

pub fn cross_entropy_per_sample(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let g = check(logits, target)?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    pixel_mean(&(g * logp)?.sum(1)?.neg()?)
}

/// Mean negative log-likelihood over all pixels.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(cross_entropy_per_sample(logits, target)?.mean_all()?)
}

/// `(1 - p)^gamma`, using exact products for small integer exponents.
fn modulating_factor(one_minus_p: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma.fract() == 0.0 && gamma <= 8.0 {
        let mut out = one_minus_p.ones_like()?;
        for _ in 0..gamma as usize {
            out = (out * one_minus_p)?;
        }
        Ok(out)
    } else {
        Ok(one_minus_p.clamp(1e-30, 1.0)?.powf(gamma)?)
    }
}

pub fn focal_loss_per_sample(logits: &Tensor, target: &Tensor, gamma: f64) -> Result<Tensor> {
    let g = check(logits, target)?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let logpt = (&g * &logp)?.sum(1)?;
    let pt = logpt.exp()?;
    let factor = modulating_factor(&pt.affine(-1.0, 1.0)?, gamma)?;
    pixel_mean(&(factor * logpt)?.neg()?)
}

/// Mean of `(1 - p_t)^gamma * -log p_t` over pixels.
pub fn focal_loss(logits: &Tensor, target: &Tensor, gamma: f64) -> Result<Tensor> {
    Ok(focal_loss_per_sample(logits, target, gamma)?.mean_all()?)
}

/// `1 - mean_c (2 sum(p g) + s) / (sum p + sum g + s)`, per sample.
pub fn dice_loss_per_sample(logits: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    let g = check(logits, target)?;
    let p = candle_nn::ops::softmax(logits, 1)?;
    let inter = (&p * &g)?.sum(D::Minus1)?.sum(D::Minus1)?;
    let psum = p.sum(D::Minus1)?.sum(D::Minus1)?;
    let gsum = g.sum(D::Minus1)?.sum(D::Minus1)?;
    let ratio = ((inter * 2.0)? + smooth)?.div(&((psum + gsum)? + smooth)?)?;
    Ok(ratio.mean(1)?.affine(-1.0, 1.0)?)
}

/// Soft Dice loss; the batch value is the mean of per-sample losses.
pub fn dice_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(dice_loss_per_sample(logits, target, 1e-6)?.mean_all()?)
}

pub fn composite_loss_per_sample(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut total: Option<Tensor> = None;
    for term in &cfg.terms {
        let (value, weight) = match term {
            LossTerm::Ce => (cross_entropy_per_sample(logits, target)?, cfg.ce_weight),
            LossTerm::Dice => (dice_loss_per_sample(logits, target, cfg.dice_smooth)?, cfg.dice_weight),
            LossTerm::Focal => (focal_loss_per_sample(logits, target, cfg.focal_gamma)?, cfg.focal_weight),
        };
        let scaled = (value * weight)?;
        total = Some(match total {
            Some(t) => (t + scaled)?,
            None => scaled,
        });
    }
    Ok(total.expect("validated non-empty"))
}

/// Weighted sum of the enabled terms.
pub fn composite_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(composite_loss_per_sample(logits, target, cfg)?.mean_all()?)
}

fn check_weights(n: usize, weights: &[f64]) -> Result<f64> {
    if n != weights.len() {
        return Err(Error::LengthMismatch { left: n, right: weights.len() });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidConfig(format!("sample weights {weights:?} must be non-negative")));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::AllZeroWeights);
    }
    Ok(total)
}

/// `sum(w_i * L_i) / sum(w_i)`.
pub fn weighted_batch_loss(per_sample_losses: &[f64], weights: &[f64]) -> Result<f64> {
    let total = check_weights(per_sample_losses.len(), weights)?;
    Ok(per_sample_losses.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() / total)
}

/// Differentiable form of [`weighted_batch_loss`] over a `[B]` loss tensor.
pub fn weighted_batch_loss_tensor(per_sample_losses: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let n = per_sample_losses.dims1()?;
    let total = check_weights(n, weights)?;
    let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let w = Tensor::from_vec(normalized, n, per_sample_losses.device())?.to_dtype(per_sample_losses.dtype())?;
    Ok((per_sample_losses * w)?.sum_all()?)
}
