use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::preprocessing::{save_rgb, CLASS_COLORS};
use crate::types::LabelMap;

/// Opacity of class colour over the grayscale frame.
const ALPHA: f32 = 0.5;

fn to_gray(frame: &Array2<f32>) -> Array2<u8> {
    let (lo, hi) = frame.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    frame.mapv(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
}

fn blend(gray: &Array2<u8>, labels: Option<&LabelMap>, img: &mut RgbImage, x_offset: u32) {
    for ((r, c), &g) in gray.indexed_iter() {
        let class = labels.map_or(0, |m| m.labels()[(r, c)] as usize);
        let px = match CLASS_COLORS[class] {
            None => [g; 3],
            Some(color) => std::array::from_fn(|k| ((1.0 - ALPHA) * f32::from(g) + ALPHA * f32::from(color[k])).round() as u8),
        };
        img.put_pixel(x_offset + c as u32, r as u32, Rgb(px));
    }
}

/// Input, ground truth and prediction side by side; class pixels are tinted
/// with the shared class palette and background stays plain grayscale.
pub fn overlay_panel(frame: &Array2<f32>, gt: &LabelMap, pred: &LabelMap) -> Result<RgbImage> {
    let (h, w) = frame.dim();
    for m in [gt, pred] {
        if m.shape() != (h, w) {
            return Err(Error::ShapeMismatch { expected: vec![h, w], actual: vec![m.shape().0, m.shape().1] });
        }
    }
    let gray = to_gray(frame);
    let mut img = RgbImage::new(3 * w as u32, h as u32);
    blend(&gray, None, &mut img, 0);
    blend(&gray, Some(gt), &mut img, w as u32);
    blend(&gray, Some(pred), &mut img, 2 * w as u32);
    Ok(img)
}

/// Writes one `<name>_overlay.png` per frame into `out_dir`.
pub fn render_overlays(
    frames: &[&Array2<f32>],
    gt: &[LabelMap],
    predictions: &[LabelMap],
    names: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let n = frames.len();
    for len in [gt.len(), predictions.len(), names.len()] {
        if len != n {
            return Err(Error::LengthMismatch { left: n, right: len });
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::IoWrite { path: out_dir.to_path_buf(), reason: e.to_string() })?;
    (0..n)
        .map(|i| {
            let safe: String = names[i].chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
            let panel = overlay_panel(frames[i], &gt[i], &predictions[i])?;
            save_rgb(&panel, &out_dir.join(format!("{safe}_overlay.png")))
        })
        .collect()
}
