use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    Unet,
    AttUnet,
    TransunetLite,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Unet, ModelKind::AttUnet, ModelKind::TransunetLite];

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Unet => "U-Net",
            ModelKind::AttUnet => "Attention U-Net",
            ModelKind::TransunetLite => "TransUNet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    Ce,
    CeDice,
    CeDiceFocal,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Ce, LossKind::CeDice, LossKind::CeDiceFocal];

    pub fn display_name(self) -> &'static str {
        match self {
            LossKind::Ce => "CE loss only",
            LossKind::CeDice => "CE + Dice loss",
            LossKind::CeDiceFocal => "CE + Dice + Focal loss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DataRoute {
    NiftiDirect,
    Png16,
    Png16Strict,
}

impl DataRoute {
    pub fn display_name(self) -> &'static str {
        match self {
            DataRoute::NiftiDirect => "NIfTI (baseline)",
            DataRoute::Png16 => "Loose PNG 16-bit",
            DataRoute::Png16Strict => "PNG 16-bit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SliceStrategy {
    /// Only the central frame, index `floor(T / 2)`.
    Middle,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregationMode {
    PerFrameMean,
    PerPatientMean,
}

/// Everything needed to reproduce one training run.
///
/// Serialized as a flat TOML table; every field has a default so partial
/// files are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub resolution: usize,
    pub loss: LossKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Defaults to 8 at 256x256 and 4 at 512x512 when unset.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub data_route: DataRoute,
    pub slice_strategy: SliceStrategy,
    pub ssl_init: bool,
    pub pseudo_enabled: bool,

    pub encoder_channels: Vec<usize>,
    pub norm_groups: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_embed_dim: usize,
    pub transformer_patch: usize,
    pub transformer_max_tokens: usize,
    pub focal_gamma: f64,
    pub ground_truth_weight: f64,
    pub pseudo_weight: f64,
    pub augment: bool,
    pub aggregation: AggregationMode,
    pub boundary_metrics: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Unet,
            resolution: 256,
            loss: LossKind::CeDice,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: None,
            epochs: 40,
            lr_step: 10,
            lr_gamma: 0.1,
            grad_clip_norm: 1.0,
            seed: 0,
            data_route: DataRoute::Png16Strict,
            slice_strategy: SliceStrategy::Middle,
            ssl_init: false,
            pseudo_enabled: false,
            encoder_channels: vec![64, 128, 256, 512, 1024],
            norm_groups: 8,
            transformer_layers: 6,
            transformer_heads: 6,
            transformer_embed_dim: 384,
            transformer_patch: 1,
            transformer_max_tokens: 1024,
            focal_gamma: 2.0,
            ground_truth_weight: crate::types::GROUND_TRUTH_WEIGHT,
            pseudo_weight: crate::types::PSEUDO_WEIGHT,
            augment: true,
            aggregation: AggregationMode::PerFrameMean,
            boundary_metrics: true,
        }
    }
}

impl RunConfig {
    pub fn effective_batch_size(&self) -> usize {
        self.batch_size
            .unwrap_or(if self.resolution >= 512 { 4 } else { 8 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let resolution_ok = match self.model {
            ModelKind::TransunetLite => [224, 256, 512].contains(&self.resolution),
            _ => [256, 512].contains(&self.resolution),
        };
        if !resolution_ok {
            return bad(format!("resolution {} not supported", self.resolution));
        }
        let bs = self.effective_batch_size();
        if !(4..=8).contains(&bs) {
            return bad(format!("batch size {bs} outside [4, 8]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative".into());
        }
        if self.lr_step == 0 {
            return bad("lr_step must be at least 1".into());
        }
        if !(self.lr_gamma > 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("lr_gamma and grad_clip_norm must be positive".into());
        }
        for w in [self.ground_truth_weight, self.pseudo_weight] {
            if !(w > 0.0 && w <= 1.0) {
                return bad(format!("sample weight {w} outside (0, 1]"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        self.model_spec().validate()
    }

    pub fn model_spec(&self) -> crate::models::ModelSpec {
        use crate::models::{ModelSpec, NormKind, TransformerSpec};
        let transformer = (self.model == ModelKind::TransunetLite).then(|| TransformerSpec {
            layers: self.transformer_layers,
            heads: self.transformer_heads,
            embed_dim: self.transformer_embed_dim,
            patch: self.transformer_patch,
            max_tokens: self.transformer_max_tokens,
        });
        ModelSpec {
            kind: self.model,
            in_channels: 1,
            num_classes: crate::types::NUM_CLASSES,
            encoder_channels: self.encoder_channels.clone(),
            norm: NormKind::Group {
                groups: self.norm_groups,
            },
            transformer,
        }
    }

    pub fn loss_config(&self) -> crate::losses::LossConfig {
        crate::losses::LossConfig::for_kind(self.loss).with_focal_gamma(self.focal_gamma)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::IoRead {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::IoWrite {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_protocol() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.lr_step, 10);
        assert_eq!(cfg.lr_gamma, 0.1);
        assert_eq!(cfg.grad_clip_norm, 1.0);
        assert_eq!(cfg.encoder_channels, vec![64, 128, 256, 512, 1024]);
        cfg.validate().unwrap();
    }

    #[test]
    fn batch_size_follows_resolution() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.effective_batch_size(), 8);
        cfg.resolution = 512;
        assert_eq!(cfg.effective_batch_size(), 4);
        cfg.batch_size = Some(6);
        assert_eq!(cfg.effective_batch_size(), 6);
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let mut cfg = RunConfig::default();
        cfg.model = ModelKind::AttUnet;
        cfg.loss = LossKind::CeDiceFocal;
        cfg.seed = 7;
        let text = cfg.to_toml_string();
        assert!(text.contains("model = \"ATT_UNET\""));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);

        let partial = RunConfig::from_toml_str("model = \"TRANSUNET_LITE\"\nresolution = 224\n").unwrap();
        assert_eq!(partial.model, ModelKind::TransunetLite);
        assert_eq!(partial.lr, 1e-4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml_str("learning_rate = 0.1").is_err());
        assert!(RunConfig::from_toml_str("resolution = 300").is_err());
        assert!(RunConfig::from_toml_str("batch_size = 16").is_err());
        assert!(RunConfig::from_toml_str("resolution = 224").is_err());
    }
}
