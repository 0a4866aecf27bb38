use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted frame side, in pixels.
pub const MIN_FRAME_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceFormat {
    NiftiFloat,
    Png16,
}

/// Apical acquisition view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum View {
    Ch2,
    Ch4,
}

/// Cardiac phase of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Ed,
    Es,
    Unlabeled,
}

/// Acquisition metadata carried alongside a frame's pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub source_format: SourceFormat,
    pub patient_id: String,
    pub view: View,
    pub phase: Phase,
    pub frame_index: usize,
    /// Physical pixel size (row, column) in millimetres, when the source records it.
    pub spacing: Option<(f64, f64)>,
    /// Set once intensities have been normalized; raw-range checks no longer apply.
    #[serde(default)]
    pub normalized: bool,
    /// File the frame was read from, if any.
    #[serde(default)]
    pub source_path: Option<String>,
}

impl FrameMeta {
    pub fn new(source_format: SourceFormat) -> Self {
        Self {
            source_format,
            patient_id: String::new(),
            view: View::Ch4,
            phase: Phase::Unlabeled,
            frame_index: 0,
            spacing: None,
            normalized: false,
            source_path: None,
        }
    }

    /// Fills patient, view and phase from a CAMUS-style stem such as
    /// `patient0001_2CH_ED`. Unrecognized tokens leave the defaults untouched.
    pub fn with_stem(mut self, stem: &str) -> Self {
        for token in stem.split('_') {
            match token {
                "2CH" => self.view = View::Ch2,
                "4CH" => self.view = View::Ch4,
                "ED" => self.phase = Phase::Ed,
                "ES" => self.phase = Phase::Es,
                _ => {}
            }
        }
        self.patient_id = crate::manifest::parse_patient_id(stem, None);
        self
    }
}

/// A validated single-channel 2-D frame.
///
/// Pixels are row-major `height x width`. Construction rejects frames smaller
/// than 16x16, non-finite intensities, and 16-bit PNG intensities outside
/// `[0, 65535]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pixels: Array2<f32>,
    meta: FrameMeta,
}

impl FrameImage {
    pub fn new(pixels: Array2<f32>, meta: FrameMeta) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE {
            return Err(Error::InvalidFrame(format!(
                "frame is {h}x{w}, minimum is {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        for ((row, col), &v) in pixels.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteIntensity { row, col });
            }
            if meta.source_format == SourceFormat::Png16
                && !meta.normalized
                && !(0.0..=65535.0).contains(&v) {
                return Err(Error::InvalidFrame(format!(
                    "16-bit PNG intensity {v} at ({row}, {col}) outside [0, 65535]"
                )));
            }
        }
        Ok(Self { pixels, meta })
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn meta(&self) -> &FrameMeta {
        &self.meta
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Replaces the pixels, keeping metadata.
    pub fn with_pixels(&self, pixels: Array2<f32>) -> Result<Self> {
        Self::new(pixels, self.meta.clone())
    }

    /// Replaces the pixels with normalized intensities.
    pub fn with_normalized_pixels(&self, pixels: Array2<f32>) -> Result<Self> {
        let mut meta = self.meta.clone();
        meta.normalized = true;
        Self::new(pixels, meta)
    }

    pub fn into_parts(self) -> (Array2<f32>, FrameMeta) {
        (self.pixels, self.meta)
    }
}
