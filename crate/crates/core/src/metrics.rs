//! Overlap and boundary metrics, confusion matrices and report aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AggregationMode, LabelMap, NUM_CLASSES};

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..NUM_CLASSES).map(|g| self.counts[g][class]).sum::<u64>() - self.counts[class][class]
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        self.counts[class].iter().sum::<u64>() - self.counts[class][class]
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn transposed(&self) -> Self {
        let mut counts = [[0; NUM_CLASSES]; NUM_CLASSES];
        for (g, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                counts[p][g] = n;
            }
        }
        Self { counts }
    }

    pub fn accumulate(&mut self, other: &ConfusionMatrix) {
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }
}

fn check_shapes(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.shape().0, gt.shape().1],
            actual: vec![pred.shape().0, pred.shape().1],
        });
    }
    Ok(())
}

pub fn confusion_matrix(pred: &LabelMap, gt: &LabelMap) -> Result<ConfusionMatrix> {
    check_shapes(pred, gt)?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
        cm.counts[g as usize][p as usize] += 1;
    }
    Ok(cm)
}

/// How a class absent from both prediction and ground truth is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EmptyClassPolicy {
    /// Correct absence scores 1.0.
    #[default]
    CountAsPerfect,
    /// Absent classes are left out (`None`).
    Exclude,
}

fn overlap_per_class(cm: &ConfusionMatrix, policy: EmptyClassPolicy, tp_scale: u64) -> [Option<f64>; NUM_CLASSES] {
    std::array::from_fn(|c| {
        let tp = cm.true_positives(c);
        let denom = tp_scale * tp + cm.false_positives(c) + cm.false_negatives(c);
        if denom == 0 {
            match policy {
                EmptyClassPolicy::CountAsPerfect => Some(1.0),
                EmptyClassPolicy::Exclude => None,
            }
        } else {
            Some((tp_scale * tp) as f64 / denom as f64)
        }
    })
}

/// Dice `2TP / (2TP + FP + FN)` per class; a class absent from both maps scores 1.0.
pub fn dice_per_class(cm: &ConfusionMatrix) -> [f64; NUM_CLASSES] {
    overlap_per_class(cm, EmptyClassPolicy::CountAsPerfect, 2).map(|v| v.expect("policy always scores"))
}

/// IoU `TP / (TP + FP + FN)` per class; a class absent from both maps scores 1.0.
pub fn iou_per_class(cm: &ConfusionMatrix) -> [f64; NUM_CLASSES] {
    overlap_per_class(cm, EmptyClassPolicy::CountAsPerfect, 1).map(|v| v.expect("policy always scores"))
}

pub fn dice_per_class_with(cm: &ConfusionMatrix, policy: EmptyClassPolicy) -> [Option<f64>; NUM_CLASSES] {
    overlap_per_class(cm, policy, 2)
}

/// Pixels of `class` with at least one 4-neighbour outside the class.
/// Pixels on the image border count as boundary.
pub fn boundary_pixels(map: &LabelMap, class: u8) -> Vec<(usize, usize)> {
    let labels = map.labels();
    let (h, w) = labels.dim();
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && labels[(r as usize, c as usize)] == class
    };
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if labels[(r, c)] != class {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !(inside(ri - 1, ci) && inside(ri + 1, ci) && inside(ri, ci - 1) && inside(ri, ci + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// Physical pixel size `(row, col)`; `(1, 1)` measures in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Self { row: 1.0, col: 1.0 }
    }
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn distance_transform_1d(f: &[f64], weight: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let (qf, pf) = (q as f64, p as f64);
            let s = ((f[q] + weight * qf * qf) - (f[p] + weight * pf * pf)) / (2.0 * weight * (qf - pf));
            if s <= z[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = weight * d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
fn squared_distance_map(sites: &[(usize, usize)], h: usize, w: usize, spacing: Spacing) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let mut col_in = vec![0f64; h];
    let mut col_out = vec![0f64; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = grid[r * w + c];
        }
        distance_transform_1d(&col_in, spacing.row * spacing.row, &mut col_out);
        for r in 0..h {
            grid[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0f64; w];
    for r in 0..h {
        distance_transform_1d(&grid[r * w..(r + 1) * w], spacing.col * spacing.col, &mut row_out);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Distances from each boundary pixel of `from` to the nearest boundary pixel of `to`.
fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)], h: usize, w: usize, spacing: Spacing) -> Vec<f64> {
    let dt = squared_distance_map(to, h, w, spacing);
    from.iter().map(|&(r, c)| dt[r * w + c].sqrt()).collect()
}

fn boundary_pair(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    check_shapes(pred, gt)?;
    let a = boundary_pixels(pred, class);
    let b = boundary_pixels(gt, class);
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyClass(class));
    }
    Ok((a, b))
}

pub fn hausdorff_distance(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    hausdorff_distance_scaled(pred, gt, class, Spacing::default())
}

/// Symmetric Hausdorff distance between the class boundaries, in units of `spacing`.
pub fn hausdorff_distance_scaled(pred: &LabelMap, gt: &LabelMap, class: u8, spacing: Spacing) -> Result<f64> {
    let (a, b) = boundary_pair(pred, gt, class)?;
    let (h, w) = gt.shape();
    let ab = directed_distances(&a, &b, h, w, spacing);
    let ba = directed_distances(&b, &a, h, w, spacing);
    Ok(ab.into_iter().chain(ba).fold(0.0, f64::max))
}

pub fn average_surface_distance(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    average_surface_distance_scaled(pred, gt, class, Spacing::default())
}

/// Average symmetric surface distance: the mean, over the boundary pixels of
/// both maps pooled together, of the distance to the other map's boundary.
pub fn average_surface_distance_scaled(pred: &LabelMap, gt: &LabelMap, class: u8, spacing: Spacing) -> Result<f64> {
    let (a, b) = boundary_pair(pred, gt, class)?;
    let (h, w) = gt.shape();
    let ab = directed_distances(&a, &b, h, w, spacing);
    let ba = directed_distances(&b, &a, h, w, spacing);
    let n = (ab.len() + ba.len()) as f64;
    Ok(ab.iter().chain(&ba).sum::<f64>() / n)
}

/// Per-class evaluation summary of one frame or an aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_dice: [f64; NUM_CLASSES],
    /// Mean over all four classes, background included.
    pub mean_dice: f64,
    /// Mean over the three cardiac structures only.
    pub mean_dice_foreground: f64,
    pub per_class_iou: [f64; NUM_CLASSES],
    pub hd: Option<[Option<f64>; NUM_CLASSES]>,
    pub asd: Option<[Option<f64>; NUM_CLASSES]>,
    pub confusion: ConfusionMatrix,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl MetricReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        let dice = dice_per_class(&cm);
        Self {
            per_class_dice: dice,
            mean_dice: mean(&dice),
            mean_dice_foreground: mean(&dice[1..]),
            per_class_iou: iou_per_class(&cm),
            hd: None,
            asd: None,
            confusion: cm,
        }
    }

    /// Scores a prediction against ground truth. Boundary metrics are filled
    /// for every class present in both maps when `boundary` is set.
    pub fn from_maps(pred: &LabelMap, gt: &LabelMap, boundary: Option<Spacing>) -> Result<Self> {
        let mut report = Self::from_confusion(confusion_matrix(pred, gt)?);
        if let Some(spacing) = boundary {
            let mut hd = [None; NUM_CLASSES];
            let mut asd = [None; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                let class = c as u8;
                match hausdorff_distance_scaled(pred, gt, class, spacing) {
                    Ok(d) => {
                        hd[c] = Some(d);
                        asd[c] = Some(average_surface_distance_scaled(pred, gt, class, spacing)?);
                    }
                    Err(Error::EmptyClass(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            report.hd = Some(hd);
            report.asd = Some(asd);
        }
        Ok(report)
    }
}

/// A per-frame report tagged with its patient.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub patient_id: String,
    pub report: MetricReport,
}

fn average(reports: &[&MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let per_class = |f: &dyn Fn(&MetricReport) -> [f64; NUM_CLASSES]| -> [f64; NUM_CLASSES] {
        std::array::from_fn(|c| reports.iter().map(|r| f(r)[c]).sum::<f64>() / n)
    };
    let optional = |f: &dyn Fn(&MetricReport) -> Option<[Option<f64>; NUM_CLASSES]>| {
        if reports.iter().all(|r| f(r).is_none()) {
            return None;
        }
        Some(std::array::from_fn(|c| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| f(r).and_then(|a| a[c])).collect();
            (!vals.is_empty()).then(|| mean(&vals))
        }))
    };
    let dice = per_class(&|r| r.per_class_dice);
    let mut confusion = ConfusionMatrix::default();
    for r in reports {
        confusion.accumulate(&r.confusion);
    }
    MetricReport {
        per_class_dice: dice,
        mean_dice: mean(&dice),
        mean_dice_foreground: mean(&dice[1..]),
        per_class_iou: per_class(&|r| r.per_class_iou),
        hd: optional(&|r| r.hd),
        asd: optional(&|r| r.asd),
        confusion,
    }
}

/// Averages frame reports, either over frames or first within each patient
/// and then across patients. Confusion matrices are summed.
pub fn aggregate_reports(frame_reports: &[FrameReport], mode: AggregationMode) -> Result<MetricReport> {
    if frame_reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    match mode {
        AggregationMode::PerFrameMean => {
            let all: Vec<&MetricReport> = frame_reports.iter().map(|f| &f.report).collect();
            Ok(average(&all))
        }
        AggregationMode::PerPatientMean => {
            let mut by_patient: BTreeMap<&str, Vec<&MetricReport>> = BTreeMap::new();
            for f in frame_reports {
                by_patient.entry(&f.patient_id).or_default().push(&f.report);
            }
            let patient_means: Vec<MetricReport> = by_patient.values().map(|r| average(r)).collect();
            let refs: Vec<&MetricReport> = patient_means.iter().collect();
            Ok(average(&refs))
        }
    }
}
