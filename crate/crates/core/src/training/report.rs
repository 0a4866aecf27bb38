use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IterationLog, RunReport};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::types::{DataRoute, LossKind, ModelKind, RunConfig, NUM_CLASSES};

const CLASS_KEYS: [&str; NUM_CLASSES] = ["background", "lv_endo", "lv_myo", "la"];

/// Cartesian product of loss, resolution and data route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub losses: Vec<LossKind>,
    pub resolutions: Vec<usize>,
    pub routes: Vec<DataRoute>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            losses: LossKind::ALL.to_vec(),
            resolutions: vec![256, 512],
            routes: vec![DataRoute::Png16, DataRoute::Png16Strict],
        }
    }
}

impl AblationGrid {
    pub fn len(&self) -> usize {
        self.losses.len() * self.resolutions.len() * self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One config per cell, sharing everything else (seed included) with `base`.
    pub fn configs(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &route in &self.routes {
            for &resolution in &self.resolutions {
                for &loss in &self.losses {
                    let mut cfg = base.clone();
                    cfg.loss = loss;
                    cfg.resolution = resolution;
                    cfg.data_route = route;
                    out.push(cfg);
                }
            }
        }
        out
    }

    pub fn cell_name(cfg: &RunConfig) -> String {
        format!("{:?}_{}_{:?}", cfg.loss, cfg.resolution, cfg.data_route).to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub model: ModelKind,
    pub loss: LossKind,
    pub resolution: usize,
    pub route: DataRoute,
    pub result: std::result::Result<RunReport, String>,
}

/// One line of the model comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub data_type: String,
    pub metrics: MetricReport,
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Flat `key value` pairs for a metric report, prefixed by `prefix`.
pub fn flatten_report(prefix: &str, m: &MetricReport) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (c, name) in CLASS_KEYS.iter().enumerate() {
        out.push((format!("{prefix}dice.{name}"), format!("{:.6}", m.per_class_dice[c])));
        out.push((format!("{prefix}iou.{name}"), format!("{:.6}", m.per_class_iou[c])));
        for (kind, values) in [("hd", &m.hd), ("asd", &m.asd)] {
            if let Some(v) = values {
                let text = v[c].map_or_else(|| "nan".to_string(), |d| format!("{d:.6}"));
                out.push((format!("{prefix}{kind}.{name}"), text));
            }
        }
    }
    out.push((format!("{prefix}mean_dice"), format!("{:.6}", m.mean_dice)));
    out.push((format!("{prefix}mean_dice_foreground"), format!("{:.6}", m.mean_dice_foreground)));
    for gt in 0..NUM_CLASSES {
        for pred in 0..NUM_CLASSES {
            out.push((format!("{prefix}confusion.{gt}.{pred}"), m.confusion.counts[gt][pred].to_string()));
        }
    }
    out
}

fn report_table(report: &RunReport) -> Vec<(String, String)> {
    let mut rows: Vec<(String, String)> = vec![
        ("seed".into(), report.environment.seed.to_string()),
        ("code_version".into(), report.environment.code_version.clone()),
        ("dataset_fingerprint".into(), report.environment.dataset_fingerprint.clone()),
        ("best_epoch".into(), report.best_epoch.to_string()),
    ];
    for e in &report.per_epoch {
        rows.push((format!("epoch.{}.lr", e.epoch), format!("{:e}", e.lr)));
        rows.push((format!("epoch.{}.train_loss", e.epoch), format!("{:.6}", e.train_loss)));
        rows.push((format!("epoch.{}.val_mean_dice", e.epoch), format!("{:.6}", e.val_mean_dice)));
    }
    for (split, m) in &report.final_metrics {
        rows.extend(flatten_report(&format!("final.{split}."), m));
    }
    rows
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::IoWrite { path: path.to_path_buf(), reason: e.to_string() })
}

/// Writes `config.toml`, `report.json`, `report.tsv`, `report.txt` and
/// `iterations.jsonl` into `dir`.
pub fn write_run_outputs(dir: &Path, report: &RunReport, iterations: &[IterationLog]) -> Result<()> {
    report.config.save(&dir.join("config.toml"))?;
    write(&dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    let tsv: String = report_table(report).into_iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
    write(&dir.join("report.tsv"), tsv)?;
    let rows: Vec<ComparisonRow> = report
        .final_metrics
        .iter()
        .map(|(split, m)| ComparisonRow {
            model: format!("{} [{split}]", report.config.model.display_name()),
            data_type: data_type_label(&report.config),
            metrics: m.clone(),
        })
        .collect();
    write(&dir.join("report.txt"), comparison_table(&rows))?;
    let mut lines = String::new();
    for it in iterations {
        lines.push_str(&serde_json::to_string(it)?);
        lines.push('\n');
    }
    write(&dir.join("iterations.jsonl"), lines)
}

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
    out
}

/// Data-type column text for a run.
pub fn data_type_label(cfg: &RunConfig) -> String {
    let base = match cfg.data_route {
        DataRoute::NiftiDirect => "NIfTI (baseline)",
        _ => "PNG 16-bit",
    };
    if cfg.ssl_init { format!("{base} + SSL") } else { base.to_string() }
}

/// Per-class Dice in percent: background, the three structures, then the
/// four-class mean and the foreground-only mean.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let header: Vec<String> =
        ["Model", "Data Type", "Background", "LV Endocardium", "LV Myocardium", "LA", "mDice", "mDice (fg)"]
            .map(String::from)
            .to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let d = &r.metrics.per_class_dice;
            vec![
                r.model.clone(),
                r.data_type.clone(),
                pct(d[0]),
                pct(d[1]),
                pct(d[2]),
                pct(d[3]),
                pct(r.metrics.mean_dice),
                pct(r.metrics.mean_dice_foreground),
            ]
        })
        .collect();
    render(&header, &body)
}

fn cell_score(cell: &AblationCell) -> Option<f64> {
    let report = cell.result.as_ref().ok()?;
    let m = report.final_metrics.get("test").or_else(|| report.final_metrics.get("val"))?;
    Some(m.mean_dice)
}

/// Mean Dice per configuration (rows) and model (columns). Scores come from
/// the test split when present, else validation; failed cells show `failed`.
pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut models: Vec<ModelKind> = cells.iter().map(|c| c.model).collect();
    models.sort();
    models.dedup();
    let mut configs: Vec<(LossKind, usize, DataRoute)> = Vec::new();
    for c in cells {
        let key = (c.loss, c.resolution, c.route);
        if !configs.contains(&key) {
            configs.push(key);
        }
    }
    let mut header = vec!["Configuration".to_string()];
    header.extend(models.iter().map(|m| m.display_name().to_string()));
    let body: Vec<Vec<String>> = configs
        .iter()
        .map(|&(loss, res, route)| {
            let mut row = vec![format!("{} / {res}x{res} / {}", loss.display_name(), route.display_name())];
            for &m in &models {
                let cell = cells.iter().find(|c| (c.model, c.loss, c.resolution, c.route) == (m, loss, res, route));
                row.push(match cell {
                    None => "-".into(),
                    Some(c) => cell_score(c).map_or_else(|| "failed".to_string(), pct),
                });
            }
            row
        })
        .collect();
    render(&header, &body)
}
