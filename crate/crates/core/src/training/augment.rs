use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{FrameImage, LabelMap};

/// Largest rotation applied, in degrees.
pub const MAX_ROTATION_DEG: f64 = 10.0;

/// One geometric transform, shared by an image and its mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { flip: false, angle_deg: 0.0 };

    /// Horizontal flip with probability 0.5, angle uniform in [-10, 10] degrees.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let angle_deg = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        Self { flip, angle_deg }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

fn flip_columns<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let mut out = a.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().to_owned()
}

/// Source coordinates of output pixel `(r, c)` under a rotation about the centre.
fn source_coords(r: usize, c: usize, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (r as f64 - cy, c as f64 - cx);
    (cos * dy + sin * dx + cy, -sin * dy + cos * dx + cx)
}

/// Bilinear rotation; samples outside the frame read as 0.
pub fn rotate_bilinear(img: &Array2<f32>, angle_deg: f64) -> Array2<f32> {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w { 0.0 } else { f64::from(img[(y as usize, x as usize)]) }
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (sy, sx) = source_coords(r, c, h, w, cos, sin);
        if sy <= -1.0 || sx <= -1.0 || sy >= h as f64 || sx >= w as f64 {
            return 0.0;
        }
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Nearest-neighbour rotation; pixels mapped from outside become background.
pub fn rotate_nearest(labels: &Array2<u8>, angle_deg: f64) -> Array2<u8> {
    if angle_deg == 0.0 {
        return labels.clone();
    }
    let (h, w) = labels.dim();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (sy, sx) = source_coords(r, c, h, w, cos, sin);
        let (y, x) = (sy.round(), sx.round());
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 { 0 } else { labels[(y as usize, x as usize)] }
    })
}

/// Applies `params` to an image array and its mask.
pub fn augment_arrays(image: &Array2<f32>, mask: &LabelMap, params: AugmentParams) -> Result<(Array2<f32>, LabelMap)> {
    if image.dim() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: vec![image.dim().0, image.dim().1],
            actual: vec![mask.shape().0, mask.shape().1],
        });
    }
    let (mut img, mut labels) = (image.clone(), mask.labels().clone());
    if params.flip {
        img = flip_columns(&img);
        labels = flip_columns(&labels);
    }
    img = rotate_bilinear(&img, params.angle_deg);
    labels = rotate_nearest(&labels, params.angle_deg);
    Ok((img, LabelMap::new(labels)?))
}

/// Random flip and small rotation, identical for frame and mask, fixed by `seed`.
pub fn augment(frame: &FrameImage, mask: &LabelMap, seed: u64) -> Result<(FrameImage, LabelMap)> {
    augment_with(frame, mask, AugmentParams::from_seed(seed))
}

pub fn augment_with(frame: &FrameImage, mask: &LabelMap, params: AugmentParams) -> Result<(FrameImage, LabelMap)> {
    let (img, labels) = augment_arrays(frame.pixels(), mask, params)?;
    Ok((frame.with_pixels(img)?, labels))
}
