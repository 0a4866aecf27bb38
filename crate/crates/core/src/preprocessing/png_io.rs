use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{validate_labelmap, FrameImage, FrameMeta, LabelMap, SourceFormat};

const U16_MAX: f64 = 65535.0;

/// Sidecar record describing how a frame was quantized to 16 bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Png16Sidecar {
    pub source_path: Option<String>,
    pub frame_index: usize,
    pub min: f64,
    pub max: f64,
    /// True when `min == max`; every pixel is then stored as 0.
    pub degenerate: bool,
}

impl Png16Sidecar {
    /// Maps a stored 16-bit value back to the original intensity scale.
    pub fn restore(&self, stored: f64) -> f64 {
        if self.degenerate {
            self.min
        } else {
            self.min + stored / U16_MAX * (self.max - self.min)
        }
    }
}

pub fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

fn write_err(path: &Path, e: impl ToString) -> Error {
    Error::IoWrite {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn read_err(path: &Path, e: impl ToString) -> Error {
    Error::IoRead {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Writes a frame as a single-channel 16-bit PNG, mapping `[min, max]` of the
/// frame affinely onto `[0, 65535]`, plus a JSON sidecar with the mapping.
pub fn export_png16(frame: &FrameImage, out_path: &Path) -> Result<PathBuf> {
    let (min, max) = frame
        .pixels()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(f64::from(v)), hi.max(f64::from(v)))
        });
    let degenerate = max <= min;
    let (h, w) = frame.shape();
    let data: Vec<u16> = frame
        .pixels()
        .iter()
        .map(|&v| {
            if degenerate {
                0
            } else {
                ((f64::from(v) - min) / (max - min) * U16_MAX).round() as u16
            }
        })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches frame size");
    img.save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| write_err(out_path, e))?;

    let sidecar = Png16Sidecar {
        source_path: frame.meta().source_path.clone(),
        frame_index: frame.meta().frame_index,
        min,
        max,
        degenerate,
    };
    let side = sidecar_path(out_path);
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| write_err(&side, e))?;
    Ok(out_path.to_path_buf())
}

/// Loads a 16-bit PNG with its stored values (`0..=65535`).
pub fn load_png16(path: &Path) -> Result<FrameImage> {
    let img = image::open(path).map_err(|e| read_err(path, e))?;
    let luma = img.into_luma16();
    let (w, h) = luma.dimensions();
    let pixels = Array2::from_shape_vec((h as usize, w as usize), luma.into_raw().into_iter().map(f32::from).collect())
        .expect("buffer matches image size");
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let mut meta = FrameMeta::new(SourceFormat::Png16).with_stem(stem);
    meta.source_path = Some(path.display().to_string());
    if let Ok(side) = read_sidecar(path) {
        meta.frame_index = side.frame_index;
    }
    FrameImage::new(pixels, meta)
}

pub fn read_sidecar(png_path: &Path) -> Result<Png16Sidecar> {
    let side = sidecar_path(png_path);
    let text = std::fs::read(&side).map_err(|e| read_err(&side, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Loads a 16-bit PNG and inverts the sidecar mapping, recovering the
/// original intensities up to quantization.
pub fn load_png16_restored(path: &Path) -> Result<FrameImage> {
    let stored = load_png16(path)?;
    let side = read_sidecar(path)?;
    let restored = stored.pixels().mapv(|v| side.restore(f64::from(v)) as f32);
    let (_, mut meta) = stored.into_parts();
    meta.source_format = SourceFormat::NiftiFloat;
    FrameImage::new(restored, meta)
}

/// Writes a label map as an 8-bit PNG holding the raw class indices.
pub fn export_mask_png(mask: &LabelMap, out_path: &Path) -> Result<PathBuf> {
    let (h, w) = mask.shape();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, mask.labels().iter().copied().collect())
            .expect("buffer matches mask size");
    img.save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| write_err(out_path, e))?;
    Ok(out_path.to_path_buf())
}

pub fn load_mask_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| read_err(path, e))?;
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    let labels = Array2::from_shape_vec((h as usize, w as usize), luma.into_raw())
        .expect("buffer matches image size");
    validate_labelmap(labels.view())
}

/// Display colour per class: background is transparent, then red, green, blue.
pub const CLASS_COLORS: [Option<[u8; 3]>; 4] =
    [None, Some([255, 0, 0]), Some([0, 255, 0]), Some([0, 0, 255])];

/// RGB rendering of a label map on black.
pub fn colorize_labels(mask: &LabelMap) -> RgbImage {
    let (h, w) = mask.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = mask.labels()[(y as usize, x as usize)] as usize;
        Rgb(CLASS_COLORS[c].unwrap_or([0, 0, 0]))
    })
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<PathBuf> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| write_err(path, e))?;
    Ok(path.to_path_buf())
}
