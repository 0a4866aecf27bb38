use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use echobench_core::contrastive::{pretrain_encoder, ContrastiveConfig};
use echobench_core::manifest::{
    build_loose_manifest, build_manifest_with, file_stem_of, normalize_stem, split_by_patient, Manifest,
    ManifestOptions, DATA_EXTENSIONS,
};
use echobench_core::models::EncoderState;
use echobench_core::preprocessing::{export_mask_png, export_png16, load_nifti_frames, load_png16};
use echobench_core::pseudo_label::{
    build_pseudo_manifest, curate_directory, score_pseudo_labels, ClassAssignment, FilterMode, FilterPolicy,
};
use echobench_core::training::{
    ablation_table, comparison_table, data_type_label, evaluate_checkpoint, load_checkpoint, load_record,
    merge_pseudo, predict_samples, render_overlays, run_ablation, train_manifest, AblationGrid,
    ComparisonRow, RunReport, TrainOptions, TrainingData,
};
use echobench_core::{class, DataRoute, FrameImage, LossKind, ModelKind, RunConfig, SliceStrategy, Split};

use crate::{
    AblateArgs, Assign, Cli, Command, ConvertArgs, EvalArgs, ManifestCommand, Mode, OverlayArgs, PretrainArgs,
    PseudoCommand, ReportArgs, Strategy, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Context_ { data_root: cli.data_root.clone(), out_root: cli.out_root.clone() };
    match &cli.command {
        Command::Convert(a) => convert(&ctx, a),
        Command::Manifest(m) => manifest(&ctx, m),
        Command::Pseudo(p) => pseudo(&ctx, p),
        Command::Pretrain(a) => pretrain(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Overlay(a) => overlay(&ctx, a),
    }
}

struct Context_ {
    data_root: Option<PathBuf>,
    out_root: PathBuf,
}

impl Context_ {
    /// Relative inputs live under the data root when one is set.
    fn input(&self, p: &Path) -> PathBuf {
        match &self.data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Creates `<out_root>/<timestamp>-<label>`.
    fn run_dir(&self, label: &str) -> Result<PathBuf> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let mut dir = self.out_root.join(format!("{stamp}-{label}"));
        let mut n = 1;
        while dir.exists() {
            n += 1;
            dir = self.out_root.join(format!("{stamp}-{label}-{n}"));
        }
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn lower_name(p: &Path) -> String {
    p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase()
}

fn is_nifti(p: &Path) -> bool {
    let n = lower_name(p);
    n.ends_with(".nii") || n.ends_with(".nii.gz")
}

/// Image files in `dir` with mask-suffixed names left out.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = lower_name(p);
            DATA_EXTENSIONS.iter().any(|ext| name.ends_with(ext))
        })
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            file_stem_of(p).is_some_and(|stem| normalize_stem(name) == stem)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn convert(ctx: &Context_, a: &ConvertArgs) -> Result<()> {
    let input = ctx.input(&a.input);
    let files = if input.is_dir() { image_files(&input)? } else { vec![input] };
    let files: Vec<PathBuf> = files.into_iter().filter(|p| is_nifti(p)).collect();
    if files.is_empty() {
        bail!("no NIfTI volumes found in {}", a.input.display());
    }
    let strategy = match a.strategy {
        Strategy::Middle => SliceStrategy::Middle,
        Strategy::All => SliceStrategy::All,
    };
    let (images, masks) = (a.output.join("images"), a.output.join("masks"));
    for d in [&images, &masks] {
        std::fs::create_dir_all(d)?;
    }
    let (mut n_img, mut n_mask) = (0, 0);
    for path in &files {
        let stem = file_stem_of(path).unwrap_or_default();
        for (frame, mask) in load_nifti_frames(path, strategy)? {
            let name = match strategy {
                SliceStrategy::Middle => stem.clone(),
                SliceStrategy::All => format!("{stem}_f{:03}", frame.meta().frame_index),
            };
            export_png16(&frame, &images.join(format!("{name}.png")))?;
            n_img += 1;
            if let Some(m) = mask {
                export_mask_png(&m, &masks.join(format!("{name}_gt.png")))?;
                n_mask += 1;
            }
        }
    }
    println!("wrote {n_img} frames and {n_mask} masks under {}", a.output.display());
    Ok(())
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text.split(',').map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => bail!("expected three comma-separated ratios, got {text:?}"),
    }
}

fn manifest(ctx: &Context_, cmd: &ManifestCommand) -> Result<()> {
    match cmd {
        ManifestCommand::Build { images, masks, out, loose, patient_pattern, split_seed } => {
            let (images, masks) = (ctx.input(images), ctx.input(masks));
            let mut m = if *loose {
                build_loose_manifest(&images, &masks)?
            } else {
                let opts = ManifestOptions {
                    patient_pattern: patient_pattern.as_deref().map(regex::Regex::new).transpose()?,
                    ..Default::default()
                };
                build_manifest_with(&images, &masks, &opts)?
            };
            if let Some(seed) = split_seed {
                m = split_by_patient(&m, (0.7, 0.15, 0.15), *seed)?;
            }
            m.write_csv(out)?;
            println!("{} records, {} orphans -> {}", m.records.len(), m.orphans.len(), out.display());
            for o in &m.orphans {
                println!("orphan: {}", o.display());
            }
        }
        ManifestCommand::Validate { manifest } => {
            let m = Manifest::read_csv(&ctx.input(manifest))?;
            m.validate()?;
            let count = |s: Split| m.records_in(s).count();
            println!(
                "ok: {} records (train {}, val {}, test {}), fingerprint {}",
                m.records.len(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test),
                m.fingerprint()
            );
        }
        ManifestCommand::Split { manifest, out, ratios, seed } => {
            let m = Manifest::read_csv(&ctx.input(manifest))?;
            let split = split_by_patient(&m, parse_ratios(ratios)?, *seed)?;
            split.write_csv(out)?;
            println!("split {} records -> {}", split.records.len(), out.display());
        }
    }
    Ok(())
}

fn pseudo(ctx: &Context_, cmd: &PseudoCommand) -> Result<()> {
    match cmd {
        PseudoCommand::Curate { sam_dir, labels, vis, iou, min_area, top_k, mode, assign } => {
            let policy = FilterPolicy {
                iou_threshold: *iou,
                min_area: *min_area,
                top_k: *top_k,
                mode: match mode {
                    Mode::Union => FilterMode::Union,
                    Mode::All => FilterMode::All,
                    Mode::Fallback => FilterMode::Fallback,
                },
            };
            let assignment = match assign {
                Assign::Score => ClassAssignment::ByScore,
                Assign::Area => ClassAssignment::ByArea,
            };
            let summary = curate_directory(&ctx.input(sam_dir), labels, vis, &policy, assignment)?;
            println!(
                "{} frames, {} label maps, {} skipped, kept {} of {} candidates",
                summary.frames,
                summary.label_maps.len(),
                summary.skipped.len(),
                summary.candidates_retained,
                summary.candidates_seen
            );
        }
        PseudoCommand::Manifest { labels, images, out } => {
            let m = build_pseudo_manifest(&ctx.input(labels), &ctx.input(images))?;
            m.write_csv(out)?;
            println!("{} pseudo-labelled records -> {}", m.records.len(), out.display());
        }
        PseudoCommand::Score { pseudo, gt } => {
            let p = Manifest::read_csv(&ctx.input(pseudo))?;
            let g = Manifest::read_csv(&ctx.input(gt))?;
            let score = score_pseudo_labels(&p, &g)?;
            println!("frames compared: {}", score.frames);
            for (name, d) in class::NAMES.iter().zip(score.per_class_dice) {
                println!("{name:<16} {d:.4}");
            }
        }
    }
    Ok(())
}

fn load_frames(dir: &Path) -> Result<Vec<FrameImage>> {
    let mut frames = Vec::new();
    for path in image_files(dir)? {
        if is_nifti(&path) {
            frames.extend(load_nifti_frames(&path, SliceStrategy::All)?.into_iter().map(|(f, _)| f));
        } else {
            frames.push(load_png16(&path)?);
        }
    }
    Ok(frames)
}

fn pretrain(ctx: &Context_, a: &PretrainArgs) -> Result<()> {
    let mut run_cfg = match &a.config {
        Some(p) => RunConfig::load(&ctx.input(p))?,
        None => RunConfig::default(),
    };
    run_cfg.model = ModelKind::Unet;
    let frames = load_frames(&ctx.input(&a.frames))?;
    let cfg = ContrastiveConfig {
        temperature: a.temperature,
        image_size: a.image_size,
        batch_size: a.batch_size,
        seed: a.seed,
        ..Default::default()
    };
    let dir = ctx.run_dir("pretrain")?;
    let report = pretrain_encoder(&frames, &run_cfg.model_spec(), &cfg, a.epochs)?;
    let path = dir.join("encoder.safetensors");
    report.state.save(&path)?;
    write_json(
        &dir.join("pretrain.json"),
        &serde_json::json!({
            "frames": frames.len(),
            "epochs": a.epochs,
            "initial_probe_loss": report.initial_probe_loss,
            "probe_losses": report.probe_losses,
            "epoch_losses": report.epoch_losses,
            "checksum": report.state.checksum()?,
        }),
    )?;
    println!(
        "probe loss {:.4} -> {:.4}; encoder saved to {}",
        report.initial_probe_loss,
        report.final_probe_loss(),
        path.display()
    );
    Ok(())
}

fn run_label(cfg: &RunConfig) -> String {
    format!("{:?}-{}", cfg.model, cfg.resolution).to_lowercase()
}

fn train(ctx: &Context_, a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&ctx.input(&a.config))?;
    let mut m = Manifest::read_csv(&ctx.input(&a.manifest))?;
    if let Some(p) = &a.pseudo_manifest {
        let pseudo = Manifest::read_csv(&ctx.input(p))?;
        let (merged, dropped) = merge_pseudo(&m, &pseudo)?;
        if dropped > 0 {
            log::warn!("dropped {dropped} pseudo-labelled records of held-out patients");
        }
        m = merged;
    }
    let encoder = a.encoder.as_ref().map(|p| EncoderState::load(&ctx.input(p))).transpose()?;
    let dir = ctx.run_dir(&run_label(&cfg))?;
    let options = TrainOptions {
        out_dir: Some(dir.clone()),
        max_iterations: a.max_iterations,
        dataset_fingerprint: m.fingerprint(),
    };
    train_manifest(&cfg, &m, encoder.as_ref(), &options)?;
    print!("{}", std::fs::read_to_string(dir.join("report.txt"))?);
    println!("run directory: {}", dir.display());
    Ok(())
}

fn eval(ctx: &Context_, a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let m = Manifest::read_csv(&ctx.input(&a.manifest))?;
    let checkpoint = ctx.input(&a.checkpoint);
    let report = evaluate_checkpoint(&checkpoint, &m, split)?;
    let (_, cfg) = load_checkpoint(&checkpoint)?;
    let row = ComparisonRow {
        model: format!("{} [{split}]", cfg.model.display_name()),
        data_type: data_type_label(&cfg),
        metrics: report.clone(),
    };
    print!("{}", comparison_table(&[row]));
    let dir = ctx.run_dir(&format!("eval-{split}"))?;
    write_json(&dir.join("metrics.json"), &report)?;
    Ok(())
}

fn parse_list<T>(text: &Option<String>, all: Vec<T>, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    match text {
        None => Ok(all),
        Some(t) => t.split(',').map(|s| parse(s.trim())).collect(),
    }
}

fn ablate(ctx: &Context_, a: &AblateArgs) -> Result<()> {
    let base = RunConfig::load(&ctx.input(&a.config))?;
    let mut routes = Vec::new();
    let mut manifests = Vec::new();
    for (route, path) in [(DataRoute::Png16, &a.loose_manifest), (DataRoute::Png16Strict, &a.strict_manifest)] {
        if let Some(p) = path {
            routes.push(route);
            manifests.push((route, Manifest::read_csv(&ctx.input(p))?));
        }
    }
    if routes.is_empty() {
        bail!("give at least one of --loose-manifest and --strict-manifest");
    }
    let grid = AblationGrid {
        losses: parse_list(&a.losses, LossKind::ALL.to_vec(), |s| {
            Ok(match s.to_ascii_uppercase().as_str() {
                "CE" => LossKind::Ce,
                "CE_DICE" => LossKind::CeDice,
                "CE_DICE_FOCAL" => LossKind::CeDiceFocal,
                other => bail!("unknown loss {other:?}"),
            })
        })?,
        resolutions: parse_list(&a.resolutions, vec![256, 512], |s| Ok(s.parse()?))?,
        routes,
    };
    let dir = ctx.run_dir(&format!("ablate-{:?}", base.model).to_lowercase())?;
    let options = TrainOptions { out_dir: Some(dir.clone()), max_iterations: a.max_iterations, dataset_fingerprint: String::new() };
    let cells = run_ablation(&grid, &base, |cfg| {
        let m = &manifests.iter().find(|(r, _)| *r == cfg.data_route).expect("route has a manifest").1;
        TrainingData::from_manifest(m, cfg)
    }, &options);
    let table = ablation_table(&cells);
    std::fs::write(dir.join("ablation.txt"), &table)?;
    write_json(&dir.join("ablation.json"), &cells)?;
    print!("{table}");
    println!("run directory: {}", dir.display());
    Ok(())
}

fn report(ctx: &Context_, a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for run in &a.runs {
        let path = ctx.input(run).join("report.json");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let r: RunReport = serde_json::from_str(&text)?;
        let Some(metrics) = r.final_metrics.get(&a.split) else {
            log::warn!("{} has no {} metrics", path.display(), a.split);
            continue;
        };
        rows.push(ComparisonRow {
            model: r.config.model.display_name().to_string(),
            data_type: data_type_label(&r.config),
            metrics: metrics.clone(),
        });
    }
    print!("{}", comparison_table(&rows));
    Ok(())
}

fn overlay(ctx: &Context_, a: &OverlayArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let m = Manifest::read_csv(&ctx.input(&a.manifest))?;
    let (model, cfg) = load_checkpoint(&ctx.input(&a.checkpoint))?;
    let mut samples = Vec::new();
    for rec in m.records_in(split) {
        samples.extend(load_record(&m, rec, &cfg)?);
        if a.limit.is_some_and(|l| samples.len() >= l) {
            break;
        }
    }
    samples.truncate(a.limit.unwrap_or(usize::MAX));
    if samples.is_empty() {
        bail!("split {split} is empty");
    }
    let preds = predict_samples(&model, &samples, cfg.effective_batch_size())?;
    let frames: Vec<&_> = samples.iter().map(|s| &s.image).collect();
    let gt: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let names: Vec<String> = samples.iter().map(|s| s.name.clone()).collect();
    let dir = ctx.run_dir(&format!("overlay-{split}"))?;
    let paths = render_overlays(&frames, &gt, &preds, &names, &dir)?;
    println!("wrote {} overlays to {}", paths.len(), dir.display());
    Ok(())
}
