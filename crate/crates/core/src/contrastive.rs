//! Contrastive (SimCLR-style) encoder pretraining on unlabeled frames.

use candle_core::{DType, Module, Tensor, D};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{images_to_tensor, EncoderNetwork, EncoderState, ModelSpec, Provenance};
use crate::nn::{clip_scale, global_grad_norm, Adam, Linear, ParamStore};
use crate::preprocessing::{resize_bilinear, robust_normalize, NormalizationParams};
use crate::types::FrameImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub projection_dim: usize,
    /// Frames are resized to a square of this side before augmentation.
    pub image_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Fraction of the frame area kept by the random crop, sampled in this range.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Additive brightness shift drawn from `[-b, b]` in normalized units.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            projection_dim: 128,
            image_size: 128,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-6,
            grad_clip_norm: 1.0,
            crop_scale: (0.5, 1.0),
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.projection_dim == 0 || self.image_size == 0 {
            return bad("projection_dim and image_size must be positive");
        }
        if self.batch_size < 2 {
            return bad("contrastive batches need at least 2 frames");
        }
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("crop_scale must satisfy 0 < lo <= hi <= 1");
        }
        Ok(())
    }
}

/// NT-Xent over `2B` projections where rows `i` and `i + B` are positives.
///
/// Rows are L2-normalized first, so any non-zero vectors are accepted.
/// Each anchor's softmax runs over the other `2B - 1` rows.
pub fn ntxent_loss(projections: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, _) = projections.dims2()?;
    if n % 2 != 0 || n < 4 {
        return Err(Error::DegenerateBatch(n / 2));
    }
    let b = n / 2;
    let norms = projections.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
    let z = projections.broadcast_div(&norms)?;
    let sim = (z.matmul(&z.t()?)? / temperature)?;
    let mut mask = vec![0f64; n * n];
    for i in 0..n {
        mask[i * n + i] = -1e30;
    }
    let mask = Tensor::from_vec(mask, (n, n), projections.device())?.to_dtype(projections.dtype())?;
    let logp = candle_nn::ops::log_softmax(&(sim + mask)?, D::Minus1)?;
    let positives: Vec<u32> = (0..n).map(|i| ((i + b) % n) as u32).collect();
    let idx = Tensor::from_vec(positives, (n, 1), projections.device())?;
    Ok(logp.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Two-layer MLP mapping pooled encoder features to the contrastive space.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(ps: &mut ParamStore, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, "projection.fc1", input, input)?,
            fc2: Linear::new(ps, "projection.fc2", input, output)?,
        })
    }
}

impl Module for ProjectionHead {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// One random view: crop, resize back, optional flip, brightness/contrast jitter.
pub fn augment_view(img: &Array2<f32>, cfg: &ContrastiveConfig, rng: &mut impl Rng) -> Array2<f32> {
    let (h, w) = img.dim();
    let scale = rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1).sqrt();
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let r0 = rng.random_range(0..=h - ch);
    let c0 = rng.random_range(0..=w - cw);
    let crop = img.slice(ndarray::s![r0..r0 + ch, c0..c0 + cw]).to_owned();
    let mut out = resize_bilinear(&crop, h, w);
    if rng.random::<f64>() < cfg.flip_prob {
        out.invert_axis(ndarray::Axis(1));
        out = out.as_standard_layout().to_owned();
    }
    let shift = rng.random_range(-cfg.brightness..=cfg.brightness) as f32;
    let gain = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) as f32;
    let mean = out.mean().unwrap_or(0.0);
    out.mapv_inplace(|v| (v - mean) * gain + mean + shift);
    out
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub state: EncoderState,
    /// Contrastive loss on the fixed probe batch before any update.
    pub initial_probe_loss: f64,
    /// Probe loss after each epoch.
    pub probe_losses: Vec<f64>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl PretrainReport {
    pub fn final_probe_loss(&self) -> f64 {
        self.probe_losses.last().copied().unwrap_or(self.initial_probe_loss)
    }
}

struct SslNetwork {
    ps: ParamStore,
    encoder: EncoderNetwork,
    head: ProjectionHead,
}

impl SslNetwork {
    fn project(&self, views: &[Array2<f32>]) -> Result<Tensor> {
        let refs: Vec<&Array2<f32>> = views.iter().collect();
        let x = images_to_tensor(&refs, self.ps.dtype())?;
        let feats = self.encoder.forward(&x)?;
        let pooled = feats.last().expect("encoder has stages").mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.head.forward(&pooled)?)
    }

    fn loss(&self, first: &[Array2<f32>], second: &[Array2<f32>], temperature: f64) -> Result<Tensor> {
        let views: Vec<Array2<f32>> = first.iter().chain(second).cloned().collect();
        ntxent_loss(&self.project(&views)?, temperature)
    }
}

fn prepare_frame(frame: &FrameImage, size: usize) -> Result<Array2<f32>> {
    let normalized = if frame.meta().normalized {
        frame.clone()
    } else {
        robust_normalize(frame, &NormalizationParams::default())?
    };
    Ok(resize_bilinear(normalized.pixels(), size, size))
}

/// Trains the encoder of `spec` with NT-Xent on augmented pairs of `frames`.
///
/// The probe batch (the first `batch_size` frames with one fixed pair of
/// views) is scored before training and after every epoch.
pub fn pretrain_encoder(
    frames: &[FrameImage],
    spec: &ModelSpec,
    cfg: &ContrastiveConfig,
    epochs: usize,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyStream);
    }
    if frames.len() < 2 {
        return Err(Error::DegenerateBatch(frames.len()));
    }
    let images = frames
        .iter()
        .map(|f| prepare_frame(f, cfg.image_size))
        .collect::<Result<Vec<_>>>()?;

    let mut ps = ParamStore::new(DType::F32, cfg.seed);
    let encoder = EncoderNetwork::new(&mut ps, spec)?;
    let width = *spec.encoder_channels.last().expect("validated");
    let head = ProjectionHead::new(&mut ps, width, cfg.projection_dim)?;
    let net = SslNetwork { ps, encoder, head };

    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let probe: Vec<&Array2<f32>> = images.iter().take(cfg.batch_size).collect();
    let probe_a: Vec<_> = probe.iter().map(|i| augment_view(i, cfg, &mut probe_rng)).collect();
    let probe_b: Vec<_> = probe.iter().map(|i| augment_view(i, cfg, &mut probe_rng)).collect();
    let probe_loss = |net: &SslNetwork| -> Result<f64> {
        Ok(net.loss(&probe_a, &probe_b, cfg.temperature)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let initial_probe_loss = probe_loss(&net)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut probe_losses = Vec::with_capacity(epochs);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let a: Vec<_> = chunk.iter().map(|&i| augment_view(&images[i], cfg, &mut rng)).collect();
            let b: Vec<_> = chunk.iter().map(|&i| augment_view(&images[i], cfg, &mut rng)).collect();
            let loss = net.loss(&a, &b, cfg.temperature)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch: epoch_losses.len(), step: steps, loss: value });
            }
            let grads = loss.backward()?;
            let norm = global_grad_norm(net.ps.iter().map(|(_, v)| v), &grads)?;
            adam.step(net.ps.iter(), &grads, clip_scale(norm, cfg.grad_clip_norm))?;
            total += value;
            steps += 1;
        }
        epoch_losses.push(if steps > 0 { total / steps as f64 } else { f64::NAN });
        probe_losses.push(probe_loss(&net)?);
        log::info!(
            "ssl epoch {}: train loss {:.4}, probe loss {:.4}",
            epoch_losses.len(),
            epoch_losses.last().unwrap(),
            probe_losses.last().unwrap()
        );
    }
    Ok(PretrainReport {
        state: EncoderState::from_params(&net.ps, Provenance::SslPretrained)?,
        initial_probe_loss,
        probe_losses,
        epoch_losses,
    })
}

/// Deterministic synthetic "ultrasound-like" frames: a bright elliptical
/// ring on a speckled background, with varying position and size.
pub fn synthetic_frames(count: usize, size: usize, seed: u64) -> Result<Vec<FrameImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let cy = rng.random_range(0.35..0.65) * size as f64;
            let cx = rng.random_range(0.35..0.65) * size as f64;
            let ry = rng.random_range(0.15..0.3) * size as f64;
            let rx = rng.random_range(0.1..0.25) * size as f64;
            let pixels = Array2::from_shape_fn((size, size), |(r, c)| {
                let d = (((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2)).sqrt();
                let ring = (-(d - 1.0).powi(2) * 20.0).exp();
                (1000.0 + 30000.0 * ring + rng.random_range(0.0..4000.0)) as f32
            });
            FrameImage::new(pixels, crate::types::FrameMeta::new(crate::types::SourceFormat::Png16))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(rows: &[[f64; 3]]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (rows.len(), 3), &Device::Cpu).unwrap()
    }

    fn value(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn identical_projections_give_ln3() {
        let z = t(&[[1.0, 0.0, 0.0]; 4]);
        assert!((value(ntxent_loss(&z, 0.5).unwrap()) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_negatives_match_enumeration() {
        // positives identical, the two pairs orthogonal
        let z = t(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let tau: f64 = 0.5;
        let pos = (1.0 / tau).exp();
        let expected = -(pos / (pos + 2.0)).ln();
        assert!((value(ntxent_loss(&z, tau).unwrap()) - expected).abs() < 1e-12);
    }

    #[test]
    fn single_pair_is_degenerate() {
        let z = t(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(ntxent_loss(&z, 0.5), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn augment_is_seeded() {
        let frames = synthetic_frames(1, 32, 0).unwrap();
        let img = prepare_frame(&frames[0], 32).unwrap();
        let cfg = ContrastiveConfig::default();
        let a = augment_view(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment_view(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.dim(), (32, 32));
    }

    #[test]
    fn empty_stream_rejected() {
        let spec = ModelSpec::new(crate::types::ModelKind::Unet).with_channels(&[4, 8]);
        assert!(matches!(
            pretrain_encoder(&[], &spec, &ContrastiveConfig::default(), 1),
            Err(Error::EmptyStream)
        ));
    }
}
