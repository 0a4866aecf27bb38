use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::preprocessing::{
    load_label_file, load_nifti_frames, load_nifti_mask, load_png16, read_nifti, resize_pair, robust_normalize,
    NormalizationParams,
};
use crate::types::{DataRoute, FrameImage, LabelMap, RunConfig, SampleRecord, SliceStrategy, Split};

/// A normalized, resized frame ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: Array2<f32>,
    pub mask: LabelMap,
    pub weight: f64,
    pub patient_id: String,
    pub name: String,
    /// Pixel size in millimetres after resizing, when the source recorded one.
    pub spacing: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub train: Vec<TrainingSample>,
    pub val: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
}

impl TrainingData {
    pub fn split(&self, split: Split) -> &[TrainingSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<TrainingSample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Loads every manifest record at the configured resolution.
    pub fn from_manifest(manifest: &Manifest, config: &RunConfig) -> Result<Self> {
        let mut data = Self::default();
        for rec in &manifest.records {
            let samples = load_record(manifest, rec, config)?;
            data.split_mut(rec.split).extend(samples);
        }
        Ok(data)
    }

    pub fn require_nonempty(&self, splits: &[Split]) -> Result<()> {
        match splits.iter().find(|s| self.split(**s).is_empty()) {
            Some(s) => Err(Error::EmptySplit(s.to_string())),
            None => Ok(()),
        }
    }
}

/// Adds pseudo-labelled records to the training split of `gt`. Records of
/// patients held out for validation or testing are dropped so that no
/// patient leaks across splits; the number dropped is returned.
pub fn merge_pseudo(gt: &Manifest, pseudo: &Manifest) -> Result<(Manifest, usize)> {
    let held_out: std::collections::BTreeSet<&str> =
        gt.records.iter().filter(|r| r.split != Split::Train).map(|r| r.patient_id.as_str()).collect();
    let mut kept = pseudo.clone();
    kept.records.retain(|r| !held_out.contains(r.patient_id.as_str()));
    let dropped = pseudo.records.len() - kept.records.len();
    for r in &mut kept.records {
        r.split = Split::Train;
    }
    Ok((gt.merge(&kept)?, dropped))
}

fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn make_sample(frame: &FrameImage, mask: &LabelMap, rec: &SampleRecord, params: &NormalizationParams, resolution: usize) -> Result<TrainingSample> {
    let normalized = robust_normalize(frame, params)?;
    let (h, w) = frame.shape();
    let (resized, mask) = resize_pair(&normalized, Some(mask), resolution)?;
    let name = format!(
        "{}#{}",
        rec.image_path.file_name().and_then(|n| n.to_str()).unwrap_or_default(),
        frame.meta().frame_index
    );
    let spacing = frame
        .meta()
        .spacing
        .map(|(r, c)| (r * h as f64 / resolution as f64, c * w as f64 / resolution as f64));
    Ok(TrainingSample {
        image: resized.into_parts().0,
        mask: mask.expect("mask was passed in"),
        weight: rec.weight,
        patient_id: rec.patient_id.clone(),
        name,
        spacing,
    })
}

/// Loads one manifest record. NIfTI images yield one sample per selected
/// frame and are normalized without percentile clipping; PNG images use the
/// default robust normalization.
pub fn load_record(manifest: &Manifest, rec: &SampleRecord, config: &RunConfig) -> Result<Vec<TrainingSample>> {
    let image_path = manifest.resolve(&rec.image_path);
    let mask_path = manifest.resolve(&rec.mask_path);
    if is_nifti(&image_path) {
        let strategy = match config.data_route {
            DataRoute::NiftiDirect => config.slice_strategy,
            _ => SliceStrategy::Middle,
        };
        let mask_frames = if is_nifti(&mask_path) { read_nifti(&mask_path)?.frame_count() } else { 1 };
        let params = NormalizationParams::unclipped();
        load_nifti_frames(&image_path, strategy)?
            .into_iter()
            .map(|(frame, _)| {
                let t = frame.meta().frame_index;
                let mask = if !is_nifti(&mask_path) {
                    load_label_file(&mask_path)?
                } else if mask_frames == 1 {
                    load_nifti_mask(&mask_path, 0)?
                } else {
                    load_nifti_mask(&mask_path, t)?
                };
                make_sample(&frame, &mask, rec, &params, config.resolution)
            })
            .collect()
    } else {
        let frame = load_png16(&image_path)?;
        let mask = load_label_file(&mask_path)?;
        Ok(vec![make_sample(&frame, &mask, rec, &NormalizationParams::default(), config.resolution)?])
    }
}

fn ellipse(r: f64, c: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> f64 {
    ((r - cy) / ry).powi(2) + ((c - cx) / rx).powi(2)
}

/// Geometric-shapes dataset: a disk (class 1) inside a ring (class 2) plus a
/// separate ellipse (class 3), each with its own intensity and mild noise.
pub fn synthetic_shapes(count: usize, size: usize, seed: u64) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    (0..count)
        .map(|i| {
            let cy = s * rng.random_range(0.35..0.45);
            let cx = s * rng.random_range(0.3..0.7);
            let inner = s * rng.random_range(0.10..0.14);
            let outer = inner + s * rng.random_range(0.05..0.08);
            let ey = s * rng.random_range(0.75..0.82);
            let ex = s * rng.random_range(0.35..0.65);
            let (ery, erx) = (s * rng.random_range(0.06..0.1), s * rng.random_range(0.1..0.16));
            let labels = Array2::from_shape_fn((size, size), |(r, c)| {
                let (r, c) = (r as f64, c as f64);
                let d = ((r - cy).powi(2) + (c - cx).powi(2)).sqrt();
                if d <= inner {
                    1
                } else if d <= outer {
                    2
                } else if ellipse(r, c, ey, ex, ery, erx) <= 1.0 {
                    3
                } else {
                    0
                }
            });
            let levels = [0.1f32, 0.9, 0.55, 0.3];
            let image = labels.mapv(|l| levels[l as usize] + rng.random_range(-0.05f32..0.05));
            TrainingSample {
                image,
                mask: LabelMap::new(labels).expect("labels are below 4"),
                weight: 1.0,
                patient_id: format!("synthetic{i:04}"),
                name: format!("shape{i:04}"),
                spacing: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_contain_all_classes() {
        let samples = synthetic_shapes(4, 64, 3);
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert!(s.mask.histogram().iter().all(|&n| n > 0), "{:?}", s.mask.histogram());
        }
        assert_eq!(synthetic_shapes(4, 64, 3), samples);
    }
}
