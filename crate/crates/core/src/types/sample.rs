use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default loss weight of an expert-annotated sample.
pub const GROUND_TRUTH_WEIGHT: f64 = 1.0;
/// Default loss weight of a pseudo-labelled sample.
pub const PSEUDO_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    GroundTruth,
    Pseudo,
}

impl SampleSource {
    pub fn default_weight(self) -> f64 {
        match self {
            SampleSource::GroundTruth => GROUND_TRUTH_WEIGHT,
            SampleSource::Pseudo => PSEUDO_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// One image/mask pair as listed in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub source: SampleSource,
    pub weight: f64,
    pub patient_id: String,
    pub split: Split,
}

impl SampleRecord {
    /// Creates a record carrying the default weight for its source.
    pub fn new(
        image_path: impl Into<PathBuf>,
        mask_path: impl Into<PathBuf>,
        source: SampleSource,
        patient_id: impl Into<String>,
    ) -> Self {
        Self {
            image_path: image_path.into(),
            mask_path: mask_path.into(),
            source,
            weight: source.default_weight(),
            patient_id: patient_id.into(),
            split: Split::Train,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Result<Self> {
        check_weight(weight)?;
        self.weight = weight;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check_weight(self.weight)
    }
}

fn check_weight(weight: f64) -> Result<()> {
    if weight > 0.0 && weight <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "sample weight {weight} outside (0, 1]"
        )))
    }
}
