use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::FrameImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Center {
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scale {
    Stddev,
}

/// Robust z-score settings: percentile clipping, then centring and scaling
/// by statistics of the clipped values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub clip_lo_pct: f64,
    pub clip_hi_pct: f64,
    pub center: Center,
    pub scale: Scale,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self {
            clip_lo_pct: 0.5,
            clip_hi_pct: 99.5,
            center: Center::Median,
            scale: Scale::Stddev,
        }
    }
}

impl NormalizationParams {
    /// Centring and scaling over the full intensity range, no clipping.
    pub fn unclipped() -> Self {
        Self {
            clip_lo_pct: 0.0,
            clip_hi_pct: 100.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.clip_lo_pct && self.clip_lo_pct < self.clip_hi_pct && self.clip_hi_pct <= 100.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "percentile bounds {}..{} must satisfy 0 <= lo < hi <= 100",
                self.clip_lo_pct, self.clip_hi_pct
            )))
        }
    }
}

/// Percentile of ascending-sorted values, linearly interpolated between
/// closest ranks (rank = p/100 * (n - 1)).
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clip bounds of a frame for the given parameters.
pub fn clip_bounds(frame: &FrameImage, params: &NormalizationParams) -> (f64, f64) {
    let sorted = sorted_values(frame);
    (
        percentile_sorted(&sorted, params.clip_lo_pct),
        percentile_sorted(&sorted, params.clip_hi_pct),
    )
}

fn sorted_values(frame: &FrameImage) -> Vec<f64> {
    let mut v: Vec<f64> = frame.pixels().iter().map(|&x| f64::from(x)).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Clips to the configured percentiles, subtracts the clipped median and
/// divides by the clipped (population) standard deviation. Frames with zero
/// spread after clipping map to all zeros.
pub fn robust_normalize(frame: &FrameImage, params: &NormalizationParams) -> Result<FrameImage> {
    params.validate()?;
    let sorted = sorted_values(frame);
    let lo = percentile_sorted(&sorted, params.clip_lo_pct);
    let hi = percentile_sorted(&sorted, params.clip_hi_pct);
    // Clipping is monotone, so the clipped values stay sorted.
    let clipped: Vec<f64> = sorted.iter().map(|v| v.clamp(lo, hi)).collect();
    let median = match params.center {
        Center::Median => percentile_sorted(&clipped, 50.0),
    };
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let std = match params.scale {
        Scale::Stddev => (clipped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt(),
    };
    let out = if std > f64::EPSILON * mean.abs().max(1.0) {
        frame
            .pixels()
            .mapv(|x| ((f64::from(x).clamp(lo, hi) - median) / std) as f32)
    } else {
        frame.pixels().mapv(|_| 0.0)
    };
    frame.with_normalized_pixels(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{FrameMeta, SourceFormat};
    use ndarray::Array2;

    fn frame(pixels: Array2<f32>) -> FrameImage {
        FrameImage::new(pixels, FrameMeta::new(SourceFormat::NiftiFloat)).unwrap()
    }

    #[test]
    fn constant_frame_maps_to_zeros() {
        let out = robust_normalize(&frame(Array2::from_elem((16, 16), 500.0)), &Default::default()).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 0.0), 1.0);
        assert_eq!(percentile_sorted(&v, 100.0), 4.0);
        assert!((percentile_sorted(&v, 50.0) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = NormalizationParams {
            clip_lo_pct: 60.0,
            clip_hi_pct: 40.0,
            ..Default::default()
        };
        let f = frame(Array2::from_shape_fn((16, 16), |(r, c)| (r * 16 + c) as f32));
        assert!(robust_normalize(&f, &p).is_err());
    }

    #[test]
    fn output_median_is_zero() {
        let f = frame(Array2::from_shape_fn((20, 17), |(r, c)| ((r * 31 + c * 7) % 97) as f32 * 3.0));
        let out = robust_normalize(&f, &Default::default()).unwrap();
        let mut v: Vec<f64> = out.pixels().iter().map(|&x| f64::from(x)).collect();
        v.sort_by(f64::total_cmp);
        assert!(percentile_sorted(&v, 50.0).abs() < 1e-6);
        assert!(out.meta().normalized);
    }
}
