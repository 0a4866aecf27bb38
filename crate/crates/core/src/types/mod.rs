//! Domain types shared by every stage of the harness.

mod config;
mod frame;
mod labels;
mod sam;
mod sample;

pub use config::{AggregationMode, DataRoute, LossKind, ModelKind, RunConfig, SliceStrategy};
pub use frame::{FrameImage, FrameMeta, Phase, SourceFormat, View, MIN_FRAME_SIDE};
pub use labels::{class, validate_labelmap, LabelMap, NUM_CLASSES};
pub use sam::{BinaryMask, SamMaskCandidate};
pub use sample::{SampleRecord, SampleSource, Split, GROUND_TRUTH_WEIGHT, PSEUDO_WEIGHT};
