//! Segmentation architectures: U-Net, Attention U-Net and a compact
//! CNN-transformer hybrid, plus encoder weight transfer.

pub mod archive;
mod attention;
mod spec;
mod transunet;
mod unet;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use archive::{load_tensors, save_tensors};
pub use attention::{AttentionGate, GateMode};
pub use spec::{ModelSpec, NormKind, TransformerSpec};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::types::{LabelMap, ModelKind};
use attention::AttentionUNet;
use transunet::TransUNetLite;
use unet::UNet;

/// Parameter-name prefix shared by every encoder tensor.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Debug, Clone)]
enum Network {
    Unet(UNet),
    AttUnet(AttentionUNet),
    TransUnet(TransUNetLite),
}

/// A constructed network together with its parameters.
#[derive(Debug)]
pub struct SegmentationModel {
    spec: ModelSpec,
    params: ParamStore,
    net: Network,
}

impl SegmentationModel {
    /// Builds the network with weights drawn from a generator seeded by `seed`.
    pub fn new(spec: &ModelSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let groups = spec.norm.groups();
        let ch = &spec.encoder_channels;
        let net = match spec.kind {
            ModelKind::Unet => Network::Unet(UNet::new(&mut ps, spec.in_channels, ch, spec.num_classes, groups)?),
            ModelKind::AttUnet => {
                let unet = UNet::new(&mut ps, spec.in_channels, ch, spec.num_classes, groups)?;
                Network::AttUnet(AttentionUNet::new(&mut ps, unet, ch)?)
            }
            ModelKind::TransunetLite => {
                let t = spec.transformer.as_ref().expect("validated");
                Network::TransUnet(TransUNetLite::new(&mut ps, spec.in_channels, ch, spec.num_classes, groups, t)?)
            }
        };
        Ok(Self { spec: spec.clone(), params: ps, net })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Logits `[B, num_classes, H, W]` for an input batch `[B, in_channels, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.spec.check_input(x.dims())?;
        let x = x.to_dtype(self.dtype())?;
        match &self.net {
            Network::Unet(n) => n.forward(&x),
            Network::AttUnet(n) => n.forward(&x),
            Network::TransUnet(n) => n.forward(&x),
        }
    }

    /// Per-pixel argmax of the logits.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<LabelMap>> {
        let labels = self.forward(x)?.argmax(1)?;
        let (b, h, w) = labels.dims3()?;
        let flat: Vec<u32> = labels.flatten_all()?.to_vec1()?;
        flat.chunks(h * w)
            .take(b)
            .map(|chunk| {
                let arr = Array2::from_shape_vec((h, w), chunk.iter().map(|&v| v as u8).collect())
                    .expect("chunk has h*w elements");
                LabelMap::new(arr)
            })
            .collect()
    }

    pub fn gates(&self) -> &[AttentionGate] {
        match &self.net {
            Network::AttUnet(n) => &n.gates,
            _ => &[],
        }
    }

    /// Sets every attention gate's mode; a no-op for models without gates.
    pub fn set_gate_mode(&mut self, mode: GateMode) {
        if let Network::AttUnet(n) = &mut self.net {
            n.gates.iter_mut().for_each(|g| g.set_mode(mode));
        }
    }

    /// Zeroes the final gate projections so every coefficient is exactly 0.5.
    pub fn zero_gate_projections(&self) -> Result<()> {
        let zeros: HashMap<String, Tensor> = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("gates.") && k.contains(".psi."))
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().zeros_like()?)))
            .collect::<Result<_>>()?;
        self.params.assign(&zeros)
    }

    /// Copies of all weights keyed by parameter name.
    pub fn state_dict(&self) -> Result<HashMap<String, Tensor>> {
        self.params.to_tensors()
    }

    /// Replaces all weights; the key set must match exactly.
    pub fn load_state_dict(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.params.load_exact("", tensors)
    }

    /// Copies every tensor whose name also exists in `other` with the same shape.
    pub fn copy_shared_weights(&self, other: &SegmentationModel) -> Result<usize> {
        let theirs = other.state_dict()?;
        let shared: HashMap<String, Tensor> = theirs
            .into_iter()
            .filter(|(k, t)| self.params.get(k).is_some_and(|v| v.dims() == t.dims()))
            .collect();
        self.params.assign(&shared)?;
        Ok(shared.len())
    }

    pub fn encoder_keys(&self) -> Vec<String> {
        self.params.names().filter(|k| k.starts_with(ENCODER_PREFIX)).cloned().collect()
    }

    pub fn export_encoder(&self, provenance: Provenance) -> Result<EncoderState> {
        let tensors = self.params.tensors_with_prefix(ENCODER_PREFIX)?.into_iter().collect();
        Ok(EncoderState { tensors, provenance })
    }

    /// Loads encoder weights. The state's keys must equal this model's encoder keys.
    pub fn transfer_encoder(&self, state: &EncoderState) -> Result<()> {
        let tensors: HashMap<String, Tensor> = state.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        self.params.load_exact(ENCODER_PREFIX, &tensors)
    }

    /// SHA-256 over the names and values of all weights matching `filter`.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> Result<String> {
        let tensors: BTreeMap<String, Tensor> = self
            .params
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        tensor_checksum(&tensors)
    }
}

/// The encoder stages of a spec on their own, registered under the same
/// parameter names the full models use.
#[derive(Debug, Clone)]
pub struct EncoderNetwork {
    encoder: unet::Encoder,
}

impl EncoderNetwork {
    pub fn new(ps: &mut ParamStore, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let encoder = unet::Encoder::new(ps, spec.in_channels, &spec.encoder_channels, spec.norm.groups())?;
        Ok(Self { encoder })
    }

    /// Feature maps of every stage, from full resolution down.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.encoder.forward(x)
    }
}

/// Stacks equally sized images into a `[B, 1, H, W]` tensor.
pub fn images_to_tensor(images: &[&Array2<f32>], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::EmptyInput);
    };
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::ShapeMismatch { expected: vec![h, w], actual: vec![img.dim().0, img.dim().1] });
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Trainable parameter count of the model `spec` describes.
pub fn count_parameters(spec: &ModelSpec) -> Result<usize> {
    Ok(SegmentationModel::new(spec, DType::F32, 0)?.num_parameters())
}

fn tensor_checksum(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let values: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Random,
    SslPretrained,
}

/// Encoder weights keyed by parameter name, tagged with their origin.
#[derive(Debug, Clone)]
pub struct EncoderState {
    tensors: BTreeMap<String, Tensor>,
    provenance: Provenance,
}

impl EncoderState {
    pub fn new(tensors: BTreeMap<String, Tensor>, provenance: Provenance) -> Self {
        Self { tensors, provenance }
    }

    /// Snapshot of the encoder tensors held in `ps`.
    pub fn from_params(ps: &ParamStore, provenance: Provenance) -> Result<Self> {
        let tensors = ps.tensors_with_prefix(ENCODER_PREFIX)?.into_iter().collect();
        Ok(Self { tensors, provenance })
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn checksum(&self) -> Result<String> {
        tensor_checksum(&self.tensors)
    }

    /// Writes a safetensors file whose metadata records the provenance and key list.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut metadata = HashMap::new();
        metadata.insert("provenance".to_string(), serde_json::to_string(&self.provenance)?);
        metadata.insert("keys".to_string(), serde_json::to_string(&self.tensors.keys().collect::<Vec<_>>())?);
        let tensors = self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        save_tensors(path, &tensors, metadata)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, metadata) = load_tensors(path)?;
        let malformed = |reason: &str| Error::IoRead { path: path.to_path_buf(), reason: reason.to_string() };
        let provenance = metadata
            .get("provenance")
            .ok_or_else(|| malformed("missing provenance metadata"))
            .and_then(|p| serde_json::from_str(p).map_err(|_| malformed("bad provenance metadata")))?;
        if let Some(keys) = metadata.get("keys") {
            let keys: Vec<String> = serde_json::from_str(keys).map_err(|_| malformed("bad key list"))?;
            let mut stored: Vec<&String> = tensors.keys().collect();
            stored.sort();
            if keys.iter().collect::<Vec<_>>() != stored {
                return Err(malformed("key list does not match stored tensors"));
            }
        }
        Ok(Self { tensors: tensors.into_iter().collect(), provenance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn toy(kind: ModelKind) -> ModelSpec {
        let mut spec = ModelSpec::new(kind).with_channels(&[4, 8, 16]);
        spec.norm = NormKind::Group { groups: 2 };
        if kind == ModelKind::TransunetLite {
            spec = spec.with_transformer(TransformerSpec { layers: 1, heads: 2, embed_dim: 8, patch: 1, max_tokens: 64 });
        }
        spec
    }

    #[test]
    fn toy_models_preserve_spatial_size() {
        for kind in ModelKind::ALL {
            let m = SegmentationModel::new(&toy(kind), DType::F32, 0).unwrap();
            let x = Tensor::zeros((2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
            assert_eq!(m.forward(&x).unwrap().dims(), &[2, 4, 16, 16], "{kind:?}");
        }
    }

    #[test]
    fn indivisible_and_overflow_errors() {
        let m = SegmentationModel::new(&toy(ModelKind::Unet), DType::F32, 0).unwrap();
        let x = Tensor::zeros((1, 1, 18, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::IndivisibleInput { divisor: 4, .. })));
        let t = SegmentationModel::new(&toy(ModelKind::TransunetLite), DType::F32, 0).unwrap();
        let x = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(t.forward(&x), Err(Error::TokenOverflow { tokens: 256, limit: 64 })));
    }

    #[test]
    fn one_stage_parameter_count_is_closed_form() {
        let mut spec = ModelSpec::new(ModelKind::Unet).with_channels(&[2, 3]);
        spec.norm = NormKind::None;
        // encoder block0: 1->2, block1: 2->3; decoder up0: 3->2 (2x2), block0: 4->2; head 2->4
        let expected = (9 * 2 + 2) + (9 * 2 * 2 + 2) + (9 * 2 * 3 + 3) + (9 * 3 * 3 + 3)
            + (3 * 2 * 4 + 2)
            + (9 * 4 * 2 + 2) + (9 * 2 * 2 + 2)
            + (2 * 4 + 4);
        assert_eq!(count_parameters(&spec).unwrap(), expected);
    }

    #[test]
    fn encoder_state_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let a = SegmentationModel::new(&toy(ModelKind::Unet), DType::F32, 1).unwrap();
        let state = a.export_encoder(Provenance::SslPretrained).unwrap();
        let path = dir.path().join("enc.safetensors");
        state.save(&path).unwrap();
        let loaded = EncoderState::load(&path).unwrap();
        assert_eq!(loaded.provenance(), Provenance::SslPretrained);
        assert_eq!(loaded.checksum().unwrap(), state.checksum().unwrap());

        let b = SegmentationModel::new(&toy(ModelKind::AttUnet), DType::F32, 2).unwrap();
        let decoder_before = b.checksum(|k| !k.starts_with(ENCODER_PREFIX)).unwrap();
        b.transfer_encoder(&loaded).unwrap();
        assert_eq!(b.checksum(|k| !k.starts_with(ENCODER_PREFIX)).unwrap(), decoder_before);
        assert_eq!(b.export_encoder(Provenance::SslPretrained).unwrap().checksum().unwrap(), state.checksum().unwrap());

        let t = SegmentationModel::new(&toy(ModelKind::TransunetLite), DType::F32, 2).unwrap();
        assert!(matches!(t.transfer_encoder(&loaded), Err(Error::KeyMismatch { .. })));
    }

    #[test]
    fn gates_zeroed_give_half() {
        let m = SegmentationModel::new(&toy(ModelKind::AttUnet), DType::F64, 0).unwrap();
        assert_eq!(m.gates().len(), 2);
        m.zero_gate_projections().unwrap();
        let skip = Tensor::randn(0f64, 1.0, (1, 4, 8, 8), &Device::Cpu).unwrap();
        let gate = Tensor::randn(0f64, 1.0, (1, 4, 4, 4), &Device::Cpu).unwrap();
        let out = m.gates()[0].forward(&skip, &gate).unwrap();
        let diff = (out - (skip * 0.5).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
        let bad = Tensor::zeros((1, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            m.gates()[0].forward(&Tensor::zeros((1, 4, 8, 8), DType::F64, &Device::Cpu).unwrap(), &bad),
            Err(Error::ShapeIncompatible { .. })
        ));
    }
}
