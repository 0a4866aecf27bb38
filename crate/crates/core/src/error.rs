use std::path::PathBuf;

/// Errors raised across the harness.
///
/// Variants map one-to-one onto the failure conditions each pipeline stage
/// can report, so callers can match on them without string inspection.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("label value {value} at (row {row}, col {col}) is outside the class set 0..=3")]
    OutOfRangeLabel { value: i64, row: usize, col: usize },

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("non-finite intensity at (row {row}, col {col})")]
    NonFiniteIntensity { row: usize, col: usize },

    #[error("unreadable volume {path}: {reason}")]
    UnreadableVolume { path: PathBuf, reason: String },

    #[error("volume {0} has no frames")]
    EmptyVolume(PathBuf),

    #[error("failed to write {path}: {reason}")]
    IoWrite { path: PathBuf, reason: String },

    #[error("failed to read {path}: {reason}")]
    IoRead { path: PathBuf, reason: String },

    #[error("resize target {0} is not one of 224, 256, 512")]
    InvalidTarget(usize),

    #[error("duplicate normalized stems: {}", format_collisions(.0))]
    DuplicateStem(Vec<(String, Vec<PathBuf>)>),

    #[error("manifest has no records")]
    EmptyManifest,

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("malformed SAM record in {path}: {reason}")]
    MalformedRecord { path: PathBuf, reason: String },

    #[error("mask {index}: stored area {stored} but decoded mask has {decoded} pixels")]
    AreaMismatch {
        index: usize,
        stored: u64,
        decoded: u64,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("no frames shared between pseudo-label and ground-truth manifests")]
    NoOverlap,

    #[error("input spatial size {height}x{width} is not divisible by {divisor}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("attention gate cannot align gate {gate:?} with skip {skip:?}")]
    ShapeIncompatible { skip: Vec<usize>, gate: Vec<usize> },

    #[error("{tokens} tokens exceed the configured limit of {limit}")]
    TokenOverflow { tokens: usize, limit: usize },

    #[error("encoder key mismatch: missing {missing:?}, unexpected {extra:?}")]
    KeyMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("length mismatch: {left} losses vs {right} weights")]
    LengthMismatch { left: usize, right: usize },

    #[error("all sample weights are zero")]
    AllZeroWeights,

    #[error("contrastive batch needs at least 2 positive pairs, got {0}")]
    DegenerateBatch(usize),

    #[error("frame stream is empty")]
    EmptyStream,

    #[error("class {0} is empty in at least one map")]
    EmptyClass(u8),

    #[error("nothing to aggregate")]
    EmptyInput,

    #[error("non-finite gradient norm")]
    NonFiniteGradient,

    #[error("split {0} has no samples")]
    EmptySplit(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_collisions(collisions: &[(String, Vec<PathBuf>)]) -> String {
    collisions
        .iter()
        .map(|(stem, paths)| {
            let names: Vec<_> = paths.iter().map(|p| p.display().to_string()).collect();
            format!("{stem} <- [{}]", names.join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
