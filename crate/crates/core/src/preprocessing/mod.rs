//! Data-representation routes: NIfTI frame extraction, 16-bit PNG export,
//! robust normalization, resizing and slice selection.

mod nifti;
mod normalize;
mod png_io;
mod resize;

use std::path::{Path, PathBuf};

pub use nifti::{read_nifti, write_nifti, NiftiDataType, NiftiVolume};
pub use normalize::{clip_bounds, percentile_sorted, robust_normalize, Center, NormalizationParams, Scale};
pub use png_io::{
    colorize_labels, export_mask_png, export_png16, load_mask_png, load_png16, load_png16_restored,
    read_sidecar, save_rgb, sidecar_path, Png16Sidecar, CLASS_COLORS,
};
pub use resize::{resize_bilinear, resize_labels, resize_nearest, resize_pair, RESIZE_TARGETS};

use crate::error::{Error, Result};
use crate::manifest::{file_stem_of, MASK_SUFFIXES};
use crate::types::{validate_labelmap, FrameImage, FrameMeta, LabelMap, SliceStrategy, SourceFormat};

/// Frame indices selected from a cine sequence of `frames` frames.
pub fn select_frames(frames: usize, strategy: SliceStrategy) -> Vec<usize> {
    match strategy {
        SliceStrategy::Middle if frames > 0 => vec![frames / 2],
        SliceStrategy::Middle => Vec::new(),
        SliceStrategy::All => (0..frames).collect(),
    }
}

/// Looks for a mask volume next to `image_path` named `<stem>{_gt,_mask,_seg}.nii[.gz]`.
pub fn sibling_mask_volume(image_path: &Path) -> Option<PathBuf> {
    let dir = image_path.parent()?;
    let stem = file_stem_of(image_path)?;
    let stem = stem.as_str();
    MASK_SUFFIXES
        .iter()
        .flat_map(|suffix| {
            ["nii.gz", "nii"]
                .into_iter()
                .map(move |ext| dir.join(format!("{stem}{suffix}.{ext}")))
        })
        .find(|p| p.is_file())
}

/// Loads a label map from an 8-bit PNG or from the first frame of a NIfTI volume.
pub fn load_label_file(path: &Path) -> Result<LabelMap> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti_mask(path, 0)
    } else {
        load_mask_png(path)
    }
}

/// Reads frames from a NIfTI volume, keeping the stored intensities.
///
/// When a sibling mask volume exists (see [`sibling_mask_volume`]) the
/// matching mask frame is returned with each image frame.
pub fn load_nifti_frames(
    path: &Path,
    strategy: SliceStrategy,
) -> Result<Vec<(FrameImage, Option<LabelMap>)>> {
    let volume = read_nifti(path)?;
    if volume.frame_count() == 0 || volume.width() == 0 || volume.height() == 0 {
        return Err(Error::EmptyVolume(path.to_path_buf()));
    }
    let masks = match sibling_mask_volume(path) {
        Some(mask_path) => {
            let mv = read_nifti(&mask_path)?;
            if (mv.height(), mv.width(), mv.frame_count())
                != (volume.height(), volume.width(), volume.frame_count())
            {
                return Err(Error::ShapeMismatch {
                    expected: vec![volume.frame_count(), volume.height(), volume.width()],
                    actual: vec![mv.frame_count(), mv.height(), mv.width()],
                });
            }
            Some(mv)
        }
        None => None,
    };
    let stem = file_stem_of(path).unwrap_or_default();
    select_frames(volume.frame_count(), strategy)
        .into_iter()
        .map(|t| {
            let mut meta = FrameMeta::new(SourceFormat::NiftiFloat).with_stem(&stem);
            meta.frame_index = t;
            meta.spacing = volume.spacing();
            meta.source_path = Some(path.display().to_string());
            let image = FrameImage::new(volume.frame(t).mapv(|v| v as f32), meta)?;
            let mask = masks
                .as_ref()
                .map(|mv| load_mask_frame(mv, t))
                .transpose()?;
            Ok((image, mask))
        })
        .collect()
}

fn load_mask_frame(volume: &NiftiVolume, t: usize) -> Result<LabelMap> {
    let frame = volume.frame(t);
    let ints = frame.mapv(|v| if v.fract() == 0.0 { v as i64 } else { -1 });
    validate_labelmap(ints.view())
}

/// Loads a label volume's frame `t` (single-frame masks use `t = 0`).
pub fn load_nifti_mask(path: &Path, t: usize) -> Result<LabelMap> {
    let volume = read_nifti(path)?;
    if t >= volume.frame_count() {
        return Err(Error::EmptyVolume(path.to_path_buf()));
    }
    load_mask_frame(&volume, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn cine(dir: &Path, name: &str, frames: usize) -> PathBuf {
        let path = dir.join(name);
        let data: Vec<Array2<f64>> = (0..frames)
            .map(|t| Array2::from_shape_fn((16, 20), |(r, c)| (t * 1000 + r * 20 + c) as f64))
            .collect();
        write_nifti(&path, &data, NiftiDataType::F32, None).unwrap()
    }

    #[test]
    fn middle_of_seven_is_three() {
        let dir = tempfile::tempdir().unwrap();
        let p = cine(dir.path(), "patient0001_4CH_half_sequence.nii.gz", 7);
        let frames = load_nifti_frames(&p, SliceStrategy::Middle).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].0.meta().frame_index, 3);
        assert_eq!(frames[0].0.pixels()[(0, 0)], 3000.0);
        assert!(frames[0].1.is_none());
    }

    #[test]
    fn all_strategy_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = cine(dir.path(), "a.nii.gz", 10);
        let frames = load_nifti_frames(&p, SliceStrategy::All).unwrap();
        let idx: Vec<usize> = frames.iter().map(|f| f.0.meta().frame_index).collect();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        let single = cine(dir.path(), "b.nii", 1);
        assert_eq!(load_nifti_frames(&single, SliceStrategy::All).unwrap().len(), 1);
    }

    #[test]
    fn even_length_uses_floor_half() {
        assert_eq!(select_frames(8, SliceStrategy::Middle), vec![4]);
        assert!(select_frames(0, SliceStrategy::Middle).is_empty());
    }

    #[test]
    fn sibling_mask_is_paired() {
        let dir = tempfile::tempdir().unwrap();
        let img = cine(dir.path(), "patient0002_2CH_ED.nii.gz", 1);
        let mask = Array2::from_shape_fn((16, 20), |(r, _)| (r % 4) as f64);
        write_nifti(&dir.path().join("patient0002_2CH_ED_gt.nii.gz"), &[mask], NiftiDataType::U8, None).unwrap();
        let frames = load_nifti_frames(&img, SliceStrategy::Middle).unwrap();
        let (frame, m) = &frames[0];
        assert_eq!(frame.meta().patient_id, "patient0002");
        assert_eq!(m.as_ref().unwrap().histogram(), [80, 80, 80, 80]);
    }

    #[test]
    fn empty_volume_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = cine(dir.path(), "e.nii", 1);
        // Patch dim[3] (frame count) to zero.
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[46..48].copy_from_slice(&0i16.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_nifti_frames(&p, SliceStrategy::All), Err(Error::EmptyVolume(_))));
    }
}
