//! Curation of automatic-mask-generator output into weighted pseudo labels.
//!
//! Input is one JSON file per frame holding scored candidate regions. The
//! candidates are filtered, merged into a four-class label map and paired
//! with their images in a manifest whose records carry the pseudo weight.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::manifest::{build_manifest_with, file_stem_of, normalize_stem, Manifest, ManifestOptions};
use crate::metrics::{confusion_matrix, dice_per_class, ConfusionMatrix};
use crate::preprocessing::{colorize_labels, export_mask_png, load_label_file, resize_labels, save_rgb};
use crate::types::{BinaryMask, LabelMap, SamMaskCandidate, SampleSource, NUM_CLASSES, PSEUDO_WEIGHT};

/// How the three retention rules combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FilterMode {
    /// Keep a candidate if any rule admits it.
    #[default]
    Union,
    /// Keep the top-k among candidates that pass both thresholds.
    All,
    /// Candidates passing both thresholds; the top-k if none do.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub iou_threshold: f64,
    pub min_area: u64,
    pub top_k: usize,
    pub mode: FilterMode,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self { iou_threshold: 0.7, min_area: 200, top_k: 3, mode: FilterMode::Union }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::InvalidConfig(format!("iou threshold {} outside [0, 1]", self.iou_threshold)));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rule mapping ranked candidates to the classes 1..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClassAssignment {
    /// The i-th best candidate by predicted IoU becomes class i + 1.
    #[default]
    ByScore,
    /// The three best candidates are labelled by decreasing area.
    ByArea,
}

/// COCO run-length counts (column-major, starting with a background run) to a mask.
pub fn decode_rle(counts: &[u64], height: usize, width: usize) -> Result<BinaryMask> {
    let total: u64 = counts.iter().sum();
    if total != (height * width) as u64 {
        return Err(Error::ShapeMismatch { expected: vec![height * width], actual: vec![total as usize] });
    }
    let mut bits = vec![false; height * width];
    let mut pos = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        if i % 2 == 1 {
            for k in pos..pos + run as usize {
                let (col, row) = (k / height, k % height);
                bits[row * width + col] = true;
            }
        }
        pos += run as usize;
    }
    BinaryMask::new(height, width, bits)
}

pub fn encode_rle(mask: &BinaryMask) -> Vec<u64> {
    let (h, w) = mask.shape();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for col in 0..w {
        for row in 0..h {
            let b = mask.get(row, col);
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

/// Decodes the compact string form of COCO run-length counts.
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let Some(&byte) = bytes.get(p) else {
                return Err(Error::MalformedRecord { path: PathBuf::new(), reason: "truncated RLE string".into() });
            };
            let c = i64::from(byte) - 48;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::MalformedRecord { path: PathBuf::new(), reason: "negative run".into() }))
        .collect()
}

pub fn encode_rle_string(counts: &[u64]) -> String {
    let mut out = String::new();
    for i in 0..counts.len() {
        let mut x = counts[i] as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c + 48) as u8 as char);
            if !more {
                break;
            }
        }
    }
    out
}

fn decode_bits(encoded: &str, height: usize, width: usize) -> std::result::Result<BinaryMask, String> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(encoded).map_err(|e| e.to_string())?;
    let n = height * width;
    if bytes.len() != n.div_ceil(8) {
        return Err(format!("expected {} packed bytes, found {}", n.div_ceil(8), bytes.len()));
    }
    let bits = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    BinaryMask::new(height, width, bits).map_err(|e| e.to_string())
}

fn decode_segmentation(seg: &Value) -> std::result::Result<BinaryMask, String> {
    let size = seg.get("size").and_then(Value::as_array).ok_or("segmentation.size missing")?;
    let dims: Vec<usize> = size.iter().filter_map(Value::as_u64).map(|v| v as usize).collect();
    let &[h, w] = dims.as_slice() else {
        return Err("segmentation.size must be [height, width]".into());
    };
    if let Some(counts) = seg.get("counts") {
        let counts: Vec<u64> = match counts {
            Value::Array(items) => items
                .iter()
                .map(|v| v.as_u64().ok_or("run-length counts must be non-negative integers"))
                .collect::<std::result::Result<_, _>>()?,
            Value::String(s) => decode_rle_string(s).map_err(|e| e.to_string())?,
            _ => return Err("segmentation.counts must be a list or string".into()),
        };
        return decode_rle(&counts, h, w).map_err(|e| e.to_string());
    }
    if let Some(bits) = seg.get("bits").and_then(Value::as_str) {
        return decode_bits(bits, h, w);
    }
    Err("segmentation needs counts or bits".into())
}

/// Parses one frame's candidate list. Accepts a bare JSON list or an object
/// with a `masks` list. Stored areas must equal the decoded pixel counts.
pub fn parse_sam_record(json_path: &Path) -> Result<Vec<SamMaskCandidate>> {
    let text = std::fs::read_to_string(json_path)
        .map_err(|e| Error::IoRead { path: json_path.to_path_buf(), reason: e.to_string() })?;
    parse_sam_json(&text).map_err(|e| match e {
        Error::MalformedRecord { reason, .. } => Error::MalformedRecord { path: json_path.to_path_buf(), reason },
        other => other,
    })
}

pub fn parse_sam_json(text: &str) -> Result<Vec<SamMaskCandidate>> {
    let malformed = |reason: String| Error::MalformedRecord { path: PathBuf::new(), reason };
    let root: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let entries = match &root {
        Value::Array(items) => items,
        Value::Object(map) => map
            .get("masks")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("expected a list of masks".into()))?,
        _ => return Err(malformed("expected a list of masks".into())),
    };
    entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let number = |key: &str| {
                entry.get(key).and_then(Value::as_f64).ok_or_else(|| malformed(format!("entry {i}: missing {key}")))
            };
            let predicted_iou = number("predicted_iou")?;
            let stability_score = number("stability_score")?;
            let area = entry
                .get("area")
                .and_then(Value::as_u64)
                .ok_or_else(|| malformed(format!("entry {i}: missing integer area")))?;
            let seg = entry.get("segmentation").ok_or_else(|| malformed(format!("entry {i}: missing segmentation")))?;
            let mask = decode_segmentation(seg).map_err(|r| malformed(format!("entry {i}: {r}")))?;
            SamMaskCandidate::new(mask, predicted_iou, area, stability_score, i)
        })
        .collect()
}

/// Serializes candidates with run-length encoded masks.
pub fn write_sam_record(path: &Path, candidates: &[SamMaskCandidate]) -> Result<()> {
    let entries: Vec<Value> = candidates
        .iter()
        .map(|c| {
            let (h, w) = c.mask.shape();
            json!({
                "predicted_iou": c.predicted_iou,
                "area": c.area,
                "stability_score": c.stability_score,
                "segmentation": {"size": [h, w], "counts": encode_rle(&c.mask)},
            })
        })
        .collect();
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(path, text).map_err(|e| Error::IoWrite { path: path.to_path_buf(), reason: e.to_string() })
}

/// Indices ordered by predicted IoU, then stability, then input position.
pub fn rank_candidates(candidates: &[SamMaskCandidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        cb.predicted_iou
            .partial_cmp(&ca.predicted_iou)
            .unwrap_or(Ordering::Equal)
            .then(cb.stability_score.partial_cmp(&ca.stability_score).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    order
}

/// Applies the retention rules; the result is in rank order.
pub fn filter_masks(candidates: &[SamMaskCandidate], policy: &FilterPolicy) -> Vec<SamMaskCandidate> {
    let order = rank_candidates(candidates);
    let passes_iou = |c: &SamMaskCandidate| c.predicted_iou >= policy.iou_threshold;
    let passes_area = |c: &SamMaskCandidate| c.area >= policy.min_area;
    let keep: Vec<usize> = match policy.mode {
        FilterMode::Union => order
            .iter()
            .enumerate()
            .filter(|&(rank, &i)| rank < policy.top_k || passes_iou(&candidates[i]) || passes_area(&candidates[i]))
            .map(|(_, &i)| i)
            .collect(),
        FilterMode::All => order
            .iter()
            .copied()
            .filter(|&i| passes_iou(&candidates[i]) && passes_area(&candidates[i]))
            .take(policy.top_k)
            .collect(),
        FilterMode::Fallback => {
            let both: Vec<usize> =
                order.iter().copied().filter(|&i| passes_iou(&candidates[i]) && passes_area(&candidates[i])).collect();
            if both.is_empty() { order.iter().copied().take(policy.top_k).collect() } else { both }
        }
    };
    keep.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Paints up to three candidates into a label map. Candidates are ranked by
/// score; a pixel covered by several takes the best-ranked one's class.
pub fn merge_to_labelmap(
    retained: &[SamMaskCandidate],
    shape: (usize, usize),
    assignment: ClassAssignment,
) -> Result<LabelMap> {
    for c in retained {
        if c.mask.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: vec![shape.0, shape.1],
                actual: vec![c.mask.shape().0, c.mask.shape().1],
            });
        }
    }
    let ranked: Vec<usize> = rank_candidates(retained).into_iter().take(NUM_CLASSES - 1).collect();
    let mut class_of = vec![0u8; ranked.len()];
    match assignment {
        ClassAssignment::ByScore => {
            for (rank, slot) in class_of.iter_mut().enumerate() {
                *slot = rank as u8 + 1;
            }
        }
        ClassAssignment::ByArea => {
            let mut by_area: Vec<usize> = (0..ranked.len()).collect();
            by_area.sort_by(|&a, &b| retained[ranked[b]].area.cmp(&retained[ranked[a]].area).then(a.cmp(&b)));
            for (cls, &rank) in by_area.iter().enumerate() {
                class_of[rank] = cls as u8 + 1;
            }
        }
    }
    let (h, w) = shape;
    let mut labels = ndarray::Array2::<u8>::zeros((h, w));
    for (rank, &i) in ranked.iter().enumerate().rev() {
        let bits = retained[i].mask.bits();
        for (px, &on) in labels.iter_mut().zip(bits) {
            if on {
                *px = class_of[rank];
            }
        }
    }
    LabelMap::new(labels)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub frames: usize,
    pub label_maps: Vec<PathBuf>,
    pub visualizations: Vec<PathBuf>,
    /// Frames with no candidates, for which no label map is written.
    pub skipped: Vec<PathBuf>,
    pub candidates_seen: usize,
    pub candidates_retained: usize,
}

/// Curates every `*.json` in `sam_dir`, writing `<stem>.png` label maps to
/// `label_dir` and RGB renderings to `vis_dir`.
pub fn curate_directory(
    sam_dir: &Path,
    label_dir: &Path,
    vis_dir: &Path,
    policy: &FilterPolicy,
    assignment: ClassAssignment,
) -> Result<CurationSummary> {
    policy.validate()?;
    for dir in [label_dir, vis_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::IoWrite { path: dir.to_path_buf(), reason: e.to_string() })?;
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(sam_dir)
        .map_err(|e| Error::IoRead { path: sam_dir.to_path_buf(), reason: e.to_string() })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut summary = CurationSummary::default();
    for path in files {
        summary.frames += 1;
        let candidates = parse_sam_record(&path)?;
        summary.candidates_seen += candidates.len();
        let Some(first) = candidates.first() else {
            log::warn!("{}: no candidates, skipping", path.display());
            summary.skipped.push(path);
            continue;
        };
        let shape = first.mask.shape();
        let retained = filter_masks(&candidates, policy);
        summary.candidates_retained += retained.len();
        let labels = merge_to_labelmap(&retained, shape, assignment)?;
        let stem = file_stem_of(&path).unwrap_or_default();
        summary.label_maps.push(export_mask_png(&labels, &label_dir.join(format!("{stem}.png")))?);
        summary.visualizations.push(save_rgb(&colorize_labels(&labels), &vis_dir.join(format!("{stem}.png")))?);
    }
    Ok(summary)
}

/// Pairs curated label maps with their images; every record gets the pseudo weight.
pub fn build_pseudo_manifest(labelmap_dir: &Path, image_dir: &Path) -> Result<Manifest> {
    let opts = ManifestOptions { source: SampleSource::Pseudo, weight: Some(PSEUDO_WEIGHT), patient_pattern: None };
    build_manifest_with(image_dir, labelmap_dir, &opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelScore {
    pub frames: usize,
    /// Dice of the pooled confusion matrix over all shared frames.
    pub per_class_dice: [f64; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
}

fn by_stem(m: &Manifest) -> BTreeMap<String, PathBuf> {
    m.records
        .iter()
        .filter_map(|r| {
            let name = r.image_path.file_name()?.to_str()?;
            Some((normalize_stem(name), m.resolve(&r.mask_path)))
        })
        .collect()
}

/// Compares pseudo label maps with ground truth over frames present in both
/// manifests (matched by image stem). Pseudo maps are resized to the ground
/// truth size with nearest-neighbour sampling when they differ.
pub fn score_pseudo_labels(pseudo: &Manifest, gt: &Manifest) -> Result<PseudoLabelScore> {
    let pseudo_maps = by_stem(pseudo);
    let gt_maps = by_stem(gt);
    let mut confusion = ConfusionMatrix::default();
    let mut frames = 0;
    for (stem, gt_path) in &gt_maps {
        let Some(pseudo_path) = pseudo_maps.get(stem) else { continue };
        let truth = load_label_file(gt_path)?;
        let mut pred = load_label_file(pseudo_path)?;
        if pred.shape() != truth.shape() {
            pred = resize_labels(&pred, truth.shape().0, truth.shape().1);
        }
        confusion.accumulate(&confusion_matrix(&pred, &truth)?);
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(PseudoLabelScore { frames, per_class_dice: dice_per_class(&confusion), confusion })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(iou: f64, stab: f64, mask: BinaryMask) -> SamMaskCandidate {
        let area = mask.count();
        SamMaskCandidate::new(mask, iou, area, stab, 0).unwrap()
    }

    fn block(h: usize, w: usize, r: std::ops::Range<usize>, c: std::ops::Range<usize>) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| r.contains(&y) && c.contains(&x))
    }

    #[test]
    fn rle_roundtrips() {
        let m = BinaryMask::from_fn(5, 7, |r, c| (r * 3 + c * 5) % 4 == 0);
        let counts = encode_rle(&m);
        assert_eq!(decode_rle(&counts, 5, 7).unwrap(), m);
        let s = encode_rle_string(&counts);
        assert_eq!(decode_rle_string(&s).unwrap(), counts);
    }

    #[test]
    fn rle_is_column_major() {
        // 2x2 with only the top-right pixel set: column-major order is
        // (0,0), (1,0), (0,1), (1,1) -> runs [2, 1, 1]
        let m = decode_rle(&[2, 1, 1], 2, 2).unwrap();
        assert!(m.get(0, 1));
        assert_eq!(m.count(), 1);
    }

    #[test]
    fn bits_are_row_major_msb_first() {
        let encoded = base64::engine::general_purpose::STANDARD.encode([0b1000_0001u8, 0b1000_0000]);
        let m = decode_bits(&encoded, 3, 3).unwrap();
        assert!(m.get(0, 0) && m.get(2, 1) && m.get(2, 2));
        assert_eq!(m.count(), 3);
    }

    #[test]
    fn parse_checks_area_and_fields() {
        let ok = r#"[{"predicted_iou": 0.9, "area": 1, "stability_score": 0.95,
                      "segmentation": {"size": [2, 2], "counts": [2, 1, 1]}}]"#;
        assert_eq!(parse_sam_json(ok).unwrap().len(), 1);
        let wrong_area = ok.replace("\"area\": 1", "\"area\": 3");
        assert!(matches!(parse_sam_json(&wrong_area), Err(Error::AreaMismatch { stored: 3, decoded: 1, .. })));
        let missing = ok.replace("\"stability_score\": 0.95,", "");
        assert!(matches!(parse_sam_json(&missing), Err(Error::MalformedRecord { .. })));
        assert!(parse_sam_json("[]").unwrap().is_empty());
        assert!(parse_sam_json(r#"{"masks": []}"#).unwrap().is_empty());
    }

    #[test]
    fn filter_rules() {
        let small = block(20, 20, 0..5, 0..10); // area 50
        let big = block(20, 20, 0..20, 0..20); // area 400
        let p = FilterPolicy::default();
        let via_iou = vec![cand(0.85, 0.9, small.clone()); 1];
        assert_eq!(filter_masks(&via_iou, &p).len(), 1);
        let five: Vec<_> = [0.5, 0.55, 0.45, 0.6, 0.4].iter().map(|&i| cand(i, 0.9, small.clone())).collect();
        let kept = filter_masks(&five, &p);
        assert_eq!(kept.iter().map(|c| c.predicted_iou).collect::<Vec<_>>(), vec![0.6, 0.55, 0.5]);
        let mut with_area = five.clone();
        with_area.push(cand(0.4, 0.9, big));
        assert_eq!(filter_masks(&with_area, &p).len(), 4);
        let strict = FilterPolicy { mode: FilterMode::All, ..p };
        assert!(filter_masks(&five, &strict).is_empty());
        let fallback = FilterPolicy { mode: FilterMode::Fallback, ..p };
        assert_eq!(filter_masks(&five, &fallback).len(), 3);
    }

    #[test]
    fn merge_priority_and_classes() {
        let a = cand(0.9, 0.9, block(6, 6, 0..3, 0..3));
        let b = cand(0.8, 0.9, block(6, 6, 2..5, 2..5));
        let map = merge_to_labelmap(&[b.clone(), a.clone()], (6, 6), ClassAssignment::ByScore).unwrap();
        assert_eq!(map.labels()[(0, 0)], 1);
        assert_eq!(map.labels()[(2, 2)], 1);
        assert_eq!(map.labels()[(4, 4)], 2);
        assert_eq!(map.labels()[(5, 5)], 0);
        assert!(merge_to_labelmap(&[], (6, 6), ClassAssignment::ByScore).unwrap().labels().iter().all(|&v| v == 0));
        assert!(matches!(
            merge_to_labelmap(&[a], (5, 6), ClassAssignment::ByScore),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn merge_by_area() {
        let small = cand(0.9, 0.9, block(6, 6, 0..1, 0..1));
        let large = cand(0.8, 0.9, block(6, 6, 3..6, 3..6));
        let map = merge_to_labelmap(&[small, large], (6, 6), ClassAssignment::ByArea).unwrap();
        assert_eq!(map.labels()[(0, 0)], 2);
        assert_eq!(map.labels()[(4, 4)], 1);
    }
}
