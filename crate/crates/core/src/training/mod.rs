//! Experiment orchestration: augmentation, the optimization loop, step-decay
//! scheduling, evaluation, ablation sweeps, reports and overlays.

mod augment;
mod data;
mod overlay;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_arrays, augment_with, rotate_bilinear, rotate_nearest, AugmentParams, MAX_ROTATION_DEG};
pub use data::{load_record, merge_pseudo, synthetic_shapes, TrainingData, TrainingSample};
pub use overlay::{overlay_panel, render_overlays};
pub use report::{
    ablation_table, comparison_table, data_type_label, flatten_report, write_run_outputs, AblationCell, AblationGrid, ComparisonRow,
};

use crate::error::{Error, Result};
use crate::losses::{composite_loss_per_sample, labels_to_tensor, weighted_batch_loss_tensor};
use crate::manifest::Manifest;
use crate::metrics::{aggregate_reports, FrameReport, MetricReport, Spacing};
use crate::models::{archive, images_to_tensor, EncoderState, SegmentationModel};
use crate::nn::{clip_scale, global_grad_norm, Adam};
use crate::types::{AggregationMode, LabelMap, RunConfig, SampleSource, Split};

/// `base_lr * gamma^floor(epoch / step)`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize, step: usize, gamma: f64) -> f64 {
    base_lr * gamma.powi((epoch / step.max(1)) as i32)
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the clipped gradients and the original norm.
pub fn clip_gradients(grads: &[Vec<f64>], max_norm: f64) -> Result<(Vec<Vec<f64>>, f64)> {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let scale = clip_scale(norm, max_norm);
    let clipped = grads.iter().map(|g| g.iter().map(|v| v * scale).collect()).collect();
    Ok((clipped, norm))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and reports; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Stops after this many optimizer steps even if epochs remain.
    pub max_iterations: Option<usize>,
    /// Included in the report's environment block.
    pub dataset_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub batch_loss: f64,
    pub per_sample_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    pub code_version: String,
    pub dataset_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub per_epoch: Vec<EpochRecord>,
    /// Metrics of the best checkpoint keyed by split name.
    #[serde(rename = "final")]
    pub final_metrics: BTreeMap<String, MetricReport>,
    pub environment: Environment,
    pub best_epoch: usize,
}

/// Everything a finished run leaves behind in memory.
#[derive(Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub iterations: Vec<IterationLog>,
    /// The network holding the best-validation weights.
    pub model: SegmentationModel,
    pub checkpoint: Option<PathBuf>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Builds the model for `config`, optionally loading a pretrained encoder.
pub fn build_model(config: &RunConfig, encoder_init: Option<&EncoderState>) -> Result<SegmentationModel> {
    let model = SegmentationModel::new(&config.model_spec(), DType::F32, config.seed)?;
    if let Some(state) = encoder_init {
        model.transfer_encoder(state)?;
    }
    Ok(model)
}

/// Trains from a manifest, loading every split at the configured resolution.
/// Pseudo-labelled records are used only when the config enables them.
pub fn train(config: &RunConfig, manifest: &Manifest, encoder_init: Option<&EncoderState>) -> Result<RunReport> {
    let options = TrainOptions { dataset_fingerprint: manifest.fingerprint(), ..Default::default() };
    Ok(train_manifest(config, manifest, encoder_init, &options)?.report)
}

pub fn train_manifest(
    config: &RunConfig,
    manifest: &Manifest,
    encoder_init: Option<&EncoderState>,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut manifest = manifest.clone();
    if !config.pseudo_enabled {
        manifest.records.retain(|r| r.source != SampleSource::Pseudo);
    }
    let data = TrainingData::from_manifest(&manifest, config)?;
    train_on(config, &data, encoder_init, options)
}

/// The training loop over already-loaded samples.
pub fn train_on(
    config: &RunConfig,
    data: &TrainingData,
    encoder_init: Option<&EncoderState>,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    data.require_nonempty(&[Split::Train, Split::Val])?;
    let encoder_init = match (config.ssl_init, encoder_init) {
        (true, None) => return Err(Error::InvalidConfig("ssl_init is set but no pretrained encoder was given".into())),
        (true, Some(state)) => Some(state),
        (false, Some(_)) => {
            log::warn!("ssl_init is off; ignoring the supplied encoder state");
            None
        }
        (false, None) => None,
    };
    let model = build_model(config, encoder_init)?;
    let loss_cfg = config.loss_config();
    let batch_size = config.effective_batch_size();
    let mut adam = Adam::new(config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_DA7A);
    let boundary = false;

    let mut iterations = Vec::new();
    let mut per_epoch = Vec::new();
    let mut best: Option<(f64, usize, HashMap<String, Tensor>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0usize;

    'epochs: for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config.lr, epoch, config.lr_step, config.lr_gamma);
        adam.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(batch_size) {
            if options.max_iterations.is_some_and(|m| step >= m) {
                break;
            }
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            let mut weights = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &data.train[i];
                let params = if config.augment { AugmentParams::from_seed(rng.next_u64()) } else { AugmentParams::IDENTITY };
                let (img, mask) = augment_arrays(&s.image, &s.mask, params)?;
                images.push(img);
                masks.push(mask);
                weights.push(s.weight);
            }
            let refs: Vec<&ndarray::Array2<f32>> = images.iter().collect();
            let x = images_to_tensor(&refs, model.dtype())?;
            let target = labels_to_tensor(&masks)?;
            let logits = model.forward(&x)?;
            let per_sample = composite_loss_per_sample(&logits, &target, &loss_cfg)?;
            let loss = weighted_batch_loss_tensor(&per_sample, &weights)?;
            let batch_loss = scalar(&loss)?;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: batch_loss });
            }
            let grads = loss.backward()?;
            let grad_norm = global_grad_norm(model.params().iter().map(|(_, v)| v), &grads)?;
            adam.step(model.params().iter(), &grads, clip_scale(grad_norm, config.grad_clip_norm))?;
            let per_sample_losses: Vec<f64> = per_sample.to_dtype(DType::F64)?.to_vec1()?;
            log::debug!("epoch {epoch} step {step} loss {batch_loss:.5} grad_norm {grad_norm:.4}");
            iterations.push(IterationLog { epoch, step, lr, batch_loss, per_sample_losses, weights, grad_norm });
            losses.push(batch_loss);
            step += 1;
        }
        if losses.is_empty() {
            break 'epochs;
        }
        let val = evaluate(&model, &data.val, config.aggregation, boundary)?;
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("epoch {epoch}: lr {lr:.2e} train loss {train_loss:.5} val mDice {:.4}", val.mean_dice);
        per_epoch.push(EpochRecord { epoch, lr, train_loss, val_mean_dice: val.mean_dice });
        if best.as_ref().is_none_or(|(d, _, _)| val.mean_dice > *d) {
            best = Some((val.mean_dice, epoch, model.state_dict()?));
        }
    }

    let (_, best_epoch, state) = best.ok_or(Error::EmptySplit(Split::Train.to_string()))?;
    model.load_state_dict(&state)?;
    let mut final_metrics = BTreeMap::new();
    for split in Split::ALL {
        let samples = data.split(split);
        if !samples.is_empty() {
            final_metrics.insert(split.to_string(), evaluate(&model, samples, config.aggregation, config.boundary_metrics)?);
        }
    }
    let report = RunReport {
        config: config.clone(),
        per_epoch,
        final_metrics,
        environment: Environment {
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_fingerprint: options.dataset_fingerprint.clone(),
        },
        best_epoch,
    };
    let checkpoint = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::IoWrite { path: dir.clone(), reason: e.to_string() })?;
            let path = dir.join("best.safetensors");
            save_checkpoint(&path, &model, config)?;
            write_run_outputs(dir, &report, &iterations)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { report, iterations, model, checkpoint })
}

/// Predicts label maps for `samples` in batches of `batch_size`.
pub fn predict_samples(model: &SegmentationModel, samples: &[TrainingSample], batch_size: usize) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ndarray::Array2<f32>> = chunk.iter().map(|s| &s.image).collect();
        out.extend(model.predict(&images_to_tensor(&refs, model.dtype())?)?);
    }
    Ok(out)
}

/// Scores a model on a set of samples without updating it.
pub fn evaluate(
    model: &SegmentationModel,
    samples: &[TrainingSample],
    aggregation: AggregationMode,
    boundary_metrics: bool,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let preds = predict_samples(model, samples, 4)?;
    let reports = samples
        .iter()
        .zip(&preds)
        .map(|(s, pred)| {
            let spacing = boundary_metrics.then(|| s.spacing.map(|(row, col)| Spacing { row, col }).unwrap_or_default());
            Ok(FrameReport { patient_id: s.patient_id.clone(), report: MetricReport::from_maps(pred, &s.mask, spacing)? })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_reports(&reports, aggregation)
}

/// Loads a checkpoint and scores one manifest split with it.
pub fn evaluate_checkpoint(checkpoint: &Path, manifest: &Manifest, split: Split) -> Result<MetricReport> {
    let (model, config) = load_checkpoint(checkpoint)?;
    let samples: Vec<TrainingSample> = manifest
        .records_in(split)
        .map(|rec| load_record(manifest, rec, &config))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    evaluate(&model, &samples, config.aggregation, config.boundary_metrics)
}

const CONFIG_KEY: &str = "run_config";

pub fn save_checkpoint(path: &Path, model: &SegmentationModel, config: &RunConfig) -> Result<()> {
    let metadata = HashMap::from([(CONFIG_KEY.to_string(), config.to_toml_string())]);
    archive::save_tensors(path, &model.state_dict()?, metadata)
}

/// Rebuilds the model recorded in a checkpoint and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(SegmentationModel, RunConfig)> {
    let (tensors, metadata) = archive::load_tensors(path)?;
    let text = metadata.get(CONFIG_KEY).ok_or_else(|| Error::MalformedRecord {
        path: path.to_path_buf(),
        reason: "checkpoint has no run configuration".into(),
    })?;
    let config = RunConfig::from_toml_str(text)?;
    let model = build_model(&config, None)?;
    let tensors = tensors
        .into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(model.dtype())?)))
        .collect::<Result<HashMap<_, _>>>()?;
    model.load_state_dict(&tensors)?;
    Ok((model, config))
}

/// Trains and evaluates one configuration per grid cell. A failing cell is
/// recorded and the sweep continues.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &RunConfig,
    mut provider: impl FnMut(&RunConfig) -> Result<TrainingData>,
    options: &TrainOptions,
) -> Vec<AblationCell> {
    grid.configs(base)
        .into_iter()
        .map(|config| {
            let cell_options = TrainOptions {
                out_dir: options.out_dir.as_ref().map(|d| d.join(AblationGrid::cell_name(&config))),
                ..options.clone()
            };
            let result = provider(&config)
                .and_then(|data| train_on(&config, &data, None, &cell_options))
                .map(|o| o.report)
                .map_err(|e| e.to_string());
            if let Err(e) = &result {
                log::warn!("ablation cell {} failed: {e}", AblationGrid::cell_name(&config));
            }
            AblationCell { model: config.model, loss: config.loss, resolution: config.resolution, route: config.data_route, result }
        })
        .collect()
}
