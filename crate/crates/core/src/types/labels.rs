use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Number of segmentation classes, background included.
pub const NUM_CLASSES: usize = 4;

/// Class indices shared by every module.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const LV_ENDOCARDIUM: u8 = 1;
    pub const LV_MYOCARDIUM: u8 = 2;
    pub const LEFT_ATRIUM: u8 = 3;

    pub const NAMES: [&str; super::NUM_CLASSES] =
        ["Background", "LV Endocardium", "LV Myocardium", "LA"];
}

/// A per-pixel class map with every value in `0..=3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    labels: Array2<u8>,
}

impl LabelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            labels: Array2::zeros((height, width)),
        }
    }

    pub fn new(labels: Array2<u8>) -> Result<Self> {
        validate_labelmap(labels.view())
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn class_count(&self) -> usize {
        NUM_CLASSES
    }

    /// Pixel counts per class.
    pub fn histogram(&self) -> [u64; NUM_CLASSES] {
        let mut counts = [0u64; NUM_CLASSES];
        for &v in &self.labels {
            counts[v as usize] += 1;
        }
        counts
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.labels
    }
}

/// Checks that every value of a 2-D integer array is a valid class index
/// and returns the corresponding [`LabelMap`]. Values are never modified.
pub fn validate_labelmap<T>(labels: ArrayView2<'_, T>) -> Result<LabelMap>
where
    T: Copy + TryInto<i64>,
{
    let mut out = Array2::<u8>::zeros(labels.dim());
    for ((row, col), &v) in labels.indexed_iter() {
        let value: i64 = v.try_into().unwrap_or(i64::MAX);
        if !(0..NUM_CLASSES as i64).contains(&value) {
            return Err(Error::OutOfRangeLabel { value, row, col });
        }
        out[(row, col)] = value as u8;
    }
    Ok(LabelMap { labels: out })
}
