use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{FrameImage, LabelMap};

/// Resize targets accepted by [`resize_pair`].
pub const RESIZE_TARGETS: [usize; 3] = [224, 256, 512];

/// Source coordinate of output index `dst` under half-pixel-centre alignment.
fn source_coord(dst: usize, scale: f64) -> f64 {
    (dst as f64 + 0.5) * scale - 0.5
}

/// Bilinear resampling with half-pixel-centre alignment and edge clamping.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let axis = |n: usize, len: usize, scale: f64| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|d| {
                let s = source_coord(d, scale).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = axis(out_h, h, sy);
    let cols = axis(out_w, w, sx);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (r0, r1, fy) = rows[r];
        let (c0, c1, fx) = cols[c];
        let top = f64::from(src[(r0, c0)]) * (1.0 - fx) + f64::from(src[(r0, c1)]) * fx;
        let bottom = f64::from(src[(r1, c0)]) * (1.0 - fx) + f64::from(src[(r1, c1)]) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Nearest-neighbour resampling; never invents values.
pub fn resize_nearest<T: Copy>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let pick = |d: usize, len: usize, out: usize| -> usize {
        (((d as f64 + 0.5) * len as f64 / out as f64).floor() as usize).min(len - 1)
    };
    let rows: Vec<usize> = (0..out_h).map(|r| pick(r, h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|c| pick(c, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| src[(rows[r], cols[c])])
}

pub fn resize_labels(mask: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    LabelMap::new(resize_nearest(mask.labels(), out_h, out_w)).expect("nearest keeps labels valid")
}

/// Resizes a frame (bilinear) and its optional mask (nearest) to
/// `target x target`.
pub fn resize_pair(
    frame: &FrameImage,
    mask: Option<&LabelMap>,
    target: usize,
) -> Result<(FrameImage, Option<LabelMap>)> {
    if !RESIZE_TARGETS.contains(&target) {
        return Err(Error::InvalidTarget(target));
    }
    if let Some(m) = mask {
        if m.shape() != frame.shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![frame.height(), frame.width()],
                actual: vec![m.shape().0, m.shape().1],
            });
        }
    }
    let image = frame.with_pixels(resize_bilinear(frame.pixels(), target, target))?;
    let mask = mask.map(|m| resize_labels(m, target, target));
    Ok((image, mask))
}
