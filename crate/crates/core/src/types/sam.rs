use crate::error::{Error, Result};

/// A dense binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height * width],
                actual: vec![bits.len()],
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Builds a mask from a predicate over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }
}

/// One candidate region proposed by an automatic mask generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SamMaskCandidate {
    pub mask: BinaryMask,
    pub predicted_iou: f64,
    pub area: u64,
    pub stability_score: f64,
}

impl SamMaskCandidate {
    /// Validates scores and the stored area against the decoded mask.
    /// `index` identifies the entry in error messages.
    pub fn new(
        mask: BinaryMask,
        predicted_iou: f64,
        area: u64,
        stability_score: f64,
        index: usize,
    ) -> Result<Self> {
        for (name, v) in [
            ("predicted_iou", predicted_iou),
            ("stability_score", stability_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::MalformedRecord {
                    path: Default::default(),
                    reason: format!("entry {index}: {name} {v} outside [0, 1]"),
                });
            }
        }
        let decoded = mask.count();
        if decoded != area {
            return Err(Error::AreaMismatch {
                index,
                stored: area,
                decoded,
            });
        }
        Ok(Self {
            mask,
            predicted_iou,
            area,
            stability_score,
        })
    }
}
