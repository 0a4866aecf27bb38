//! Acceptance harness: one pass/fail line per criterion.
//!
//! Run with `cargo test -p echobench-core --test acceptance`. Extra
//! arguments select criteria by number, e.g. `-- 1 2 11`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use echobench_core::contrastive::{ntxent_loss, pretrain_encoder, synthetic_frames, ContrastiveConfig};
use echobench_core::losses::{
    composite_loss, cross_entropy, dice_loss, focal_loss, labels_to_tensor, weighted_batch_loss, LossConfig,
};
use echobench_core::manifest::{build_manifest, split_by_patient};
use echobench_core::metrics::{
    average_surface_distance, confusion_matrix, dice_per_class, hausdorff_distance, iou_per_class,
};
use echobench_core::models::{GateMode, ModelSpec, NormKind, SegmentationModel};
use echobench_core::preprocessing::{
    clip_bounds, export_mask_png, export_png16, load_mask_png, load_png16_restored, NormalizationParams,
};
use echobench_core::pseudo_label::{filter_masks, FilterPolicy};
use echobench_core::training::{clip_gradients, lr_at_epoch, synthetic_shapes, train_on, TrainOptions, TrainingData};
use echobench_core::{
    BinaryMask, Error, FrameImage, FrameMeta, LabelMap, LossKind, ModelKind, RunConfig, SamMaskCandidate,
    SourceFormat, Split,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn random_map(rng: &mut impl Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    LabelMap::new(Array2::from_shape_fn((h, w), |_| rng.random_range(0..classes))).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap())
}

// Criterion 1

fn pixel_set(map: &LabelMap, class: u8) -> BTreeSet<(usize, usize)> {
    map.labels().indexed_iter().filter(|(_, &v)| v == class).map(|(p, _)| p).collect()
}

fn brute_overlap(pred: &LabelMap, gt: &LabelMap, class: u8) -> (f64, f64) {
    let (a, b) = (pixel_set(pred, class), pixel_set(gt, class));
    if a.is_empty() && b.is_empty() {
        return (1.0, 1.0);
    }
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    ((2 * inter) as f64 / (a.len() + b.len()) as f64, inter as f64 / union as f64)
}

fn brute_boundary(map: &LabelMap, class: u8) -> Vec<(usize, usize)> {
    let labels = map.labels();
    let (h, w) = labels.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if labels[(r, c)] != class {
                continue;
            }
            let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            let edge = neighbours.iter().any(|&(nr, nc)| nr >= h || nc >= w || labels[(nr, nc)] != class);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

fn nearest(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter()
        .map(|&q| ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

fn brute_hd_asd(pred: &LabelMap, gt: &LabelMap, class: u8) -> Option<(f64, f64)> {
    let (a, b) = (brute_boundary(pred, class), brute_boundary(gt, class));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let ab: Vec<f64> = a.iter().map(|&p| nearest(p, &b)).collect();
    let ba: Vec<f64> = b.iter().map(|&p| nearest(p, &a)).collect();
    let hd = ab.iter().chain(&ba).fold(0.0f64, |m, &d| m.max(d));
    let asd = ab.iter().chain(&ba).sum::<f64>() / (ab.len() + ba.len()) as f64;
    Some((hd, asd))
}

fn blob_map(rng: &mut impl Rng, size: usize) -> LabelMap {
    let mut labels = Array2::<u8>::zeros((size, size));
    for _ in 0..rng.random_range(1..4) {
        let (r0, c0) = (rng.random_range(0..size), rng.random_range(0..size));
        let (h, w) = (rng.random_range(1..=size / 2), rng.random_range(1..=size / 2));
        for r in r0..(r0 + h).min(size) {
            for c in c0..(c0 + w).min(size) {
                labels[(r, c)] = 1;
            }
        }
    }
    for _ in 0..rng.random_range(0..6) {
        labels[(rng.random_range(0..size), rng.random_range(0..size))] ^= 1;
    }
    LabelMap::new(labels).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let (pred, gt) = (random_map(&mut rng, 16, 16, 4), random_map(&mut rng, 16, 16, 4));
        let cm = confusion_matrix(&pred, &gt).map_err(|e| e.to_string())?;
        let (dice, iou) = (dice_per_class(&cm), iou_per_class(&cm));
        for c in 0..4u8 {
            let (d, j) = brute_overlap(&pred, &gt, c);
            ensure(dice[c as usize] == d && iou[c as usize] == j, || {
                format!("pair {i} class {c}: dice {} vs {d}, iou {} vs {j}", dice[c as usize], iou[c as usize])
            })?;
        }
    }
    let mut worst = 0.0f64;
    let mut compared = 0;
    for i in 0..200 {
        let (pred, gt) = (blob_map(&mut rng, 16), blob_map(&mut rng, 16));
        let hd = hausdorff_distance(&pred, &gt, 1);
        let asd = average_surface_distance(&pred, &gt, 1);
        match brute_hd_asd(&pred, &gt, 1) {
            Some((bh, ba)) => {
                let (hd, asd) = (hd.map_err(|e| e.to_string())?, asd.map_err(|e| e.to_string())?);
                worst = worst.max((hd - bh).abs()).max((asd - ba).abs());
                ensure(worst <= 1e-9, || format!("pair {i}: hd {hd} vs {bh}, asd {asd} vs {ba}"))?;
                compared += 1;
            }
            None => ensure(matches!(hd, Err(Error::EmptyClass(1))), || format!("pair {i}: empty class not reported"))?,
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 overlap pairs exact, {compared} boundary pairs max err {worst:.1e}, {elapsed:.2?}"))
}

// Criterion 2

fn criterion_2() -> Outcome {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let maps: Vec<LabelMap> = (0..2).map(|_| random_map(&mut rng, 5, 5, 4)).collect();
    let target = labels_to_tensor(&maps).unwrap();

    let uniform = Tensor::zeros((2, 4, 5, 5), DType::F64, &dev).unwrap();
    let ce_uniform = scalar(&cross_entropy(&uniform, &target).unwrap());
    ensure((ce_uniform - 4f64.ln()).abs() <= 1e-6, || format!("uniform CE {ce_uniform}"))?;

    let logits = Tensor::randn(0f64, 2.0, (2, 4, 5, 5), &dev).unwrap();
    let ce = scalar(&cross_entropy(&logits, &target).unwrap());
    let focal0 = scalar(&focal_loss(&logits, &target, 0.0).unwrap());
    ensure((ce - focal0).abs() <= 1e-9, || format!("focal(0) {focal0} vs CE {ce}"))?;

    let dice = scalar(&dice_loss(&logits, &target).unwrap());
    let focal = scalar(&focal_loss(&logits, &target, 2.0).unwrap());
    let full = |w: (f64, f64, f64)| {
        let cfg = LossConfig::for_kind(LossKind::CeDiceFocal).with_weights(w.0, w.1, w.2);
        scalar(&composite_loss(&logits, &target, &cfg).unwrap())
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w: (f64, f64, f64) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let v: (f64, f64, f64) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let expected = w.0 * ce + w.1 * dice + w.2 * focal;
        worst = worst.max((full(w) - expected).abs());
        let summed = full((w.0 + v.0, w.1 + v.1, w.2 + v.2));
        worst = worst.max((summed - full(w) - full(v)).abs());
    }
    ensure(worst <= 1e-9, || format!("composite linearity error {worst:e}"))?;

    let weighted = weighted_batch_loss(&[2.0, 4.0], &[1.0, 0.5]).map_err(|e| e.to_string())?;
    ensure((weighted - 2.6667).abs() <= 1e-4, || format!("weighted batch loss {weighted}"))?;
    Ok(format!("CE(uniform)={ce_uniform:.7}, linearity err {worst:.1e}, weighted={weighted:.4}"))
}

// Criterion 3

/// `||a - n|| / max(||a||, ||n||)` over the flattened gradients.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-300)
}

fn gradient_check(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let numeric = (0..base.len())
        .map(|i| {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                scalar(&f(&Tensor::from_vec(v, x.dims(), x.device()).unwrap()))
            };
            (eval(eps) - eval(-eps)) / (2.0 * eps)
        })
        .collect();
    (analytic, numeric)
}

fn criterion_3() -> Outcome {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = labels_to_tensor(&[random_map(&mut rng, 2, 2, 4)]).unwrap();
    let logits = Tensor::randn(0f64, 1.0, (1, 4, 2, 2), &dev).unwrap();
    let mut summary = Vec::new();
    let losses: [(&str, Box<dyn Fn(&Tensor) -> Tensor>); 3] = [
        ("CE", Box::new(|l: &Tensor| cross_entropy(l, &target).unwrap())),
        ("Dice", Box::new(|l: &Tensor| dice_loss(l, &target).unwrap())),
        ("Focal", Box::new(|l: &Tensor| focal_loss(l, &target, 2.0).unwrap())),
    ];
    for (name, f) in &losses {
        let (a, n) = gradient_check(f, &logits, 1e-6);
        let err = relative_error(&a, &n);
        ensure(err <= 1e-4, || format!("{name} gradient relative error {err:e}"))?;
        summary.push(format!("{name} {err:.1e}"));
    }

    let mut spec = ModelSpec::new(ModelKind::Unet).with_channels(&[4, 8, 16]);
    spec.norm = NormKind::Group { groups: 2 };
    let model = SegmentationModel::new(&spec, DType::F64, 3).unwrap();
    let x = Tensor::randn(0f64, 1.0, (1, 1, 32, 32), &dev).unwrap();
    let probe = Tensor::randn(0f64, 1.0, (1, 4, 32, 32), &dev).unwrap();
    let objective = |x: &Tensor| (model.forward(x).unwrap() * &probe).unwrap().sum_all().unwrap();
    let (a, n) = gradient_check(objective, &x, 1e-6);
    let err = relative_error(&a, &n);
    ensure(err <= 1e-3, || format!("U-Net input gradient relative error {err:e}"))?;
    summary.push(format!("U-Net input {err:.1e}"));
    Ok(summary.join(", "))
}

// Criterion 4

fn criterion_4() -> Outcome {
    let dev = Device::Cpu;
    let mut lines = Vec::new();
    for kind in ModelKind::ALL {
        let model = SegmentationModel::new(&ModelSpec::new(kind), DType::F32, 4).unwrap();
        let mut cases = vec![((2, 1, 256, 256), (2, 4, 256, 256)), ((1, 1, 512, 512), (1, 4, 512, 512))];
        if kind == ModelKind::TransunetLite {
            cases.push(((1, 1, 224, 224), (1, 4, 224, 224)));
        }
        for (input, expected) in cases {
            let x = Tensor::zeros(input, DType::F32, &dev).unwrap();
            let y = model.forward(&x).map_err(|e| format!("{kind:?} {input:?}: {e}"))?;
            let want = [expected.0, expected.1, expected.2, expected.3];
            ensure(y.dims() == want, || format!("{kind:?} {input:?} -> {:?}", y.dims()))?;
        }
        let bad = Tensor::zeros((1, 1, 250, 250), DType::F32, &dev).unwrap();
        ensure(matches!(model.forward(&bad), Err(Error::IndivisibleInput { .. })), || {
            format!("{kind:?} accepted a 250x250 input")
        })?;
        lines.push(format!("{} ok", kind.display_name()));
    }
    Ok(format!("{}; 250x250 rejected", lines.join(", ")))
}

// Criterion 5

fn criterion_5() -> Outcome {
    let spec = |kind| ModelSpec::new(kind).with_channels(&[8, 16, 32, 64, 128]);
    let plain = SegmentationModel::new(&spec(ModelKind::Unet), DType::F32, 5).unwrap();
    let mut gated = SegmentationModel::new(&spec(ModelKind::AttUnet), DType::F32, 6).unwrap();
    let copied = gated.copy_shared_weights(&plain).map_err(|e| e.to_string())?;
    ensure(copied == plain.state_dict().unwrap().len(), || format!("only {copied} tensors shared"))?;
    gated.set_gate_mode(GateMode::ForcedOpen);
    let x = Tensor::randn(0f32, 1.0, (2, 1, 64, 64), &Device::Cpu).unwrap();
    let diff = max_abs_diff(&plain.forward(&x).unwrap(), &gated.forward(&x).unwrap());
    ensure(diff == 0.0, || format!("max |difference| {diff:e}"))?;
    Ok(format!("{copied} shared tensors, logits identical"))
}

// Criterion 6

fn candidate(rng: &mut impl Rng, index: usize) -> SamMaskCandidate {
    let area = rng.random_range(0..=400u64);
    let bits = (0..32 * 32).map(|k| (k as u64) < area).collect();
    let mask = BinaryMask::new(32, 32, bits).unwrap();
    let iou = if rng.random_bool(0.2) { 0.7 } else { rng.random_range(0.0..1.0) };
    SamMaskCandidate::new(mask, iou, area, rng.random_range(0.0..1.0), index).unwrap()
}

/// Indices kept by the union rule, coded directly from the rule text.
fn union_oracle(cands: &[SamMaskCandidate]) -> BTreeSet<usize> {
    let mut top: Vec<usize> = (0..cands.len()).collect();
    top.sort_by(|&a, &b| {
        let key = |i: usize| (cands[i].predicted_iou, cands[i].stability_score);
        key(b).partial_cmp(&key(a)).unwrap().then(a.cmp(&b))
    });
    top.truncate(3);
    (0..cands.len())
        .filter(|&i| cands[i].predicted_iou >= 0.7 || cands[i].area >= 200 || top.contains(&i))
        .collect()
}

fn criterion_6() -> Outcome {
    let policy = FilterPolicy::default();
    ensure((policy.iou_threshold, policy.min_area, policy.top_k) == (0.7, 200, 3), || {
        format!("default policy {policy:?}")
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut kept_total = 0;
    for set in 0..500 {
        let n = rng.random_range(0..12);
        let cands: Vec<SamMaskCandidate> = (0..n).map(|i| candidate(&mut rng, i)).collect();
        let kept = filter_masks(&cands, &policy);
        let got: BTreeSet<usize> =
            kept.iter().map(|k| cands.iter().position(|c| c == k).expect("kept candidate from input")).collect();
        ensure(got.len() == kept.len(), || format!("set {set}: duplicated output"))?;
        let want = union_oracle(&cands);
        ensure(got == want, || format!("set {set}: kept {got:?}, oracle {want:?}"))?;
        kept_total += got.len();
    }
    Ok(format!("500 sets agree ({kept_total} retained)"))
}

// Criterion 7

fn touch(path: &Path) {
    std::fs::write(path, b"").unwrap();
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (images, masks) = (dir.path().join("images"), dir.path().join("masks"));
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&masks).unwrap();
    let suffixes = ["_mask", "_gt", "_seg"];
    let exts = [".png", ".nii.gz", ".nii"];
    let mut pairs = BTreeMap::new();
    for i in 0..95 {
        let stem = format!("patient{:04}_{}CH_{}", i / 2 + 1, if i % 2 == 0 { 2 } else { 4 }, ["ED", "ES"][i % 3 % 2]);
        let stem = format!("{stem}_{i}");
        let img = images.join(format!("{stem}{}", exts[i % 3]));
        let mask = masks.join(format!("{stem}{}{}", suffixes[i % 3], exts[(i / 3) % 3]));
        touch(&img);
        touch(&mask);
        pairs.insert(img, mask);
    }
    let mut planted = BTreeSet::new();
    for i in 0..5 {
        let img = images.join(format!("patient{:04}_2CH_ED.png", 900 + i));
        let mask = masks.join(format!("patient{:04}_4CH_ES_gt.png", 950 + i));
        touch(&img);
        touch(&mask);
        planted.insert(img);
        planted.insert(mask);
    }
    let file_count = std::fs::read_dir(&images).unwrap().count() + std::fs::read_dir(&masks).unwrap().count();
    ensure(file_count == 200, || format!("corpus has {file_count} files"))?;

    let m = build_manifest(&images, &masks).map_err(|e| e.to_string())?;
    ensure(m.records.len() == pairs.len(), || format!("{} of {} pairs found", m.records.len(), pairs.len()))?;
    for r in &m.records {
        let (img, mask) = (m.resolve(&r.image_path), m.resolve(&r.mask_path));
        ensure(pairs.get(&img) == Some(&mask), || format!("{} paired with {}", img.display(), mask.display()))?;
    }
    let orphans: BTreeSet<_> = m.orphans.iter().map(|p| m.resolve(p)).collect();
    ensure(orphans == planted, || format!("orphans {orphans:?}"))?;

    let dup_dir = dir.path().join("dups");
    std::fs::create_dir_all(&dup_dir).unwrap();
    for name in ["a_2CH.png", "a_2CH_gt.png", "a_2CH_mask.png", "b_4CH.png", "b_4CH.nii.gz", "b_4CH_seg.png", "c.png", "c_gt.png"] {
        touch(&dup_dir.join(name));
    }
    let stems: BTreeSet<String> = match build_manifest(&dup_dir, &dup_dir) {
        Err(Error::DuplicateStem(collisions)) => collisions.into_iter().map(|(s, _)| s).collect(),
        other => return Err(format!("duplicate stems not reported: {other:?}")),
    };
    ensure(stems == ["a_2CH", "b_4CH"].into_iter().map(String::from).collect(), || format!("collisions {stems:?}"))?;

    for seed in 0..100 {
        let split = split_by_patient(&m, (0.7, 0.15, 0.15), seed).map_err(|e| e.to_string())?;
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &split.records {
            let prev = *seen.entry(r.patient_id.as_str()).or_insert(r.split);
            ensure(prev == r.split, || format!("seed {seed}: patient {} in {prev} and {}", r.patient_id, r.split))?;
        }
    }
    Ok(format!("{} pairs, {} orphans, 2 collisions, no leakage over 100 seeds", m.records.len(), orphans.len()))
}

// Criterion 8

fn oracle_percentile(values: &[f32], pct: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if frac == 0.0 { v[i] } else { v[i] + (v[i + 1] - v[i]) * frac }
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = NormalizationParams::default();
    let mut worst_ratio = 0.0f64;
    for i in 0..100 {
        let (h, w) = (rng.random_range(16..48), rng.random_range(16..48));
        let offset = rng.random_range(-1000.0..1000.0f32);
        let span = rng.random_range(1.0..5000.0f32);
        let pixels = Array2::from_shape_fn((h, w), |_| offset + span * rng.random::<f32>());
        let frame = FrameImage::new(pixels.clone(), FrameMeta::new(SourceFormat::NiftiFloat)).unwrap();
        let path = dir.path().join(format!("f{i}.png"));
        export_png16(&frame, &path).map_err(|e| e.to_string())?;
        let restored = load_png16_restored(&path).map_err(|e| e.to_string())?;
        let (lo, hi) = pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v as f64), h.max(v as f64))
        });
        let tol = (hi - lo) / 65535.0;
        let err = pixels
            .iter()
            .zip(restored.pixels())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(err / tol);
        ensure(err <= tol, || format!("frame {i}: error {err} > {tol}"))?;

        let values: Vec<f32> = pixels.iter().copied().collect();
        let bounds = clip_bounds(&frame, &params);
        let want = (oracle_percentile(&values, 0.5), oracle_percentile(&values, 99.5));
        ensure(bounds == want, || format!("frame {i}: clip bounds {bounds:?} vs {want:?}"))?;

        let mask = random_map(&mut rng, h, w, 4);
        let mpath = dir.path().join(format!("m{i}.png"));
        export_mask_png(&mask, &mpath).map_err(|e| e.to_string())?;
        let back = load_mask_png(&mpath).map_err(|e| e.to_string())?;
        ensure(back == mask, || format!("mask {i} changed in roundtrip"))?;
    }
    Ok(format!("100 frames, worst error {worst_ratio:.3} of a quantization step; bounds and masks exact"))
}

// Criterion 9

fn overfit_config(kind: ModelKind) -> RunConfig {
    RunConfig {
        model: kind,
        resolution: 256,
        loss: LossKind::CeDice,
        lr: 1e-3,
        weight_decay: 0.0,
        batch_size: Some(4),
        // 8 samples in batches of 4: two iterations per epoch.
        epochs: 100,
        lr_step: 10_000,
        augment: false,
        encoder_channels: vec![8, 16, 32, 64, 128],
        transformer_layers: 1,
        transformer_heads: 4,
        transformer_embed_dim: 64,
        transformer_max_tokens: 256,
        boundary_metrics: false,
        ..Default::default()
    }
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let train = synthetic_shapes(8, 256, 9);
    let data = TrainingData { val: train[..2].to_vec(), train, test: Vec::new() };
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for kind in ModelKind::ALL {
        let t = Instant::now();
        let cfg = overfit_config(kind);
        let options = TrainOptions { max_iterations: Some(200), ..Default::default() };
        let outcome = train_on(&cfg, &data, None, &options).map_err(|e| format!("{kind:?}: {e}"))?;
        let iterations = outcome.iterations.len();
        let dice = outcome.report.final_metrics["train"].mean_dice;
        let line = format!("{} mDice {dice:.4} in {iterations} it ({:.0?})", kind.display_name(), t.elapsed());
        if dice < 0.95 || iterations > 200 {
            failures.push(line.clone());
        }
        lines.push(line);
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(3600) {
        failures.push(format!("total {elapsed:?} exceeds 60 min"));
    }
    if failures.is_empty() {
        Ok(format!("{}; total {elapsed:.0?}", lines.join(", ")))
    } else {
        Err(failures.join("; "))
    }
}

// Criterion 10

fn criterion_10() -> Outcome {
    let frames = synthetic_frames(100, 96, 10).map_err(|e| e.to_string())?;
    let spec = ModelSpec::new(ModelKind::Unet).with_channels(&[8, 16, 32, 64, 128]);
    let cfg = ContrastiveConfig { image_size: 64, batch_size: 16, seed: 10, ..Default::default() };
    let report = pretrain_encoder(&frames, &spec, &cfg, 5).map_err(|e| e.to_string())?;
    let (before, after) = (report.initial_probe_loss, report.final_probe_loss());
    ensure(after < before, || format!("probe loss {before:.4} -> {after:.4}"))?;

    let same = Tensor::ones((4, 8), DType::F64, &Device::Cpu).unwrap();
    let l = scalar(&ntxent_loss(&same, 0.5).map_err(|e| e.to_string())?);
    ensure((l - 3f64.ln()).abs() <= 1e-6, || format!("identical-batch NT-Xent {l}"))?;
    Ok(format!("probe loss {before:.4} -> {after:.4}; identical batch {l:.7}"))
}

// Criterion 11

fn criterion_11() -> Outcome {
    let lrs: Vec<f64> = [0, 10, 20].iter().map(|&e| lr_at_epoch(1e-4, e, 10, 0.1)).collect();
    for (got, want) in lrs.iter().zip([1e-4, 1e-5, 1e-6]) {
        ensure((got - want).abs() <= want * 1e-12, || format!("schedule {lrs:?}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let grads: Vec<Vec<f64>> = (0..rng.random_range(1..5))
            .map(|_| (0..rng.random_range(1..50)).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (clipped, _) = clip_gradients(&grads, 1.0).map_err(|e| e.to_string())?;
        let norm = clipped.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        worst = worst.max(norm);
        ensure(norm <= 1.0 + 1e-6, || format!("clipped norm {norm}"))?;
    }
    Ok(format!("lr {lrs:?}; max clipped norm {worst:.9}"))
}

// Criterion 12

fn criterion_12() -> Option<Outcome> {
    let dir = std::env::var_os("ECHOBENCH_PAPER_RUNS")?;
    let targets = [("unet_nifti", 94.3), ("unet_png", 91.0), ("att_unet", 92.7), ("transunet", 93.2), ("ssl_unet", 92.8)];
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (name, target) in targets {
        let path = Path::new(&dir).join(name).join("report.json");
        let Ok(text) = std::fs::read_to_string(&path) else {
            failures.push(format!("{name}: missing {}", path.display()));
            continue;
        };
        let report: echobench_core::training::RunReport = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                continue;
            }
        };
        let Some(test) = report.final_metrics.get("test") else {
            failures.push(format!("{name}: no test metrics"));
            continue;
        };
        let got = 100.0 * test.mean_dice;
        let line = format!("{name} {got:.1} (target {target})");
        if (got - target).abs() > 2.0 {
            failures.push(line.clone());
        }
        lines.push(line);
    }
    Some(if failures.is_empty() { Ok(lines.join(", ")) } else { Err(failures.join("; ")) })
}

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let gating: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "metrics oracle equivalence", criterion_1),
        (2, "formula spot checks", criterion_2),
        (3, "gradient checks", criterion_3),
        (4, "shape contracts", criterion_4),
        (5, "forced-open gates equal U-Net", criterion_5),
        (6, "SAM filter oracle", criterion_6),
        (7, "manifest correctness", criterion_7),
        (8, "preprocessing fidelity", criterion_8),
        (9, "overfit sanity", criterion_9),
        (10, "SSL sanity", criterion_10),
        (11, "schedule and clipping", criterion_11),
    ];
    let mut failed = 0;
    for (n, name, check) in gating {
        if !want(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{:.1?}]", t.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{:.1?}]", t.elapsed());
            }
        }
    }
    if want(12) {
        match criterion_12() {
            None => println!("criterion 12 SKIP  paper-scale reproduction: set ECHOBENCH_PAPER_RUNS to score finished runs"),
            Some(Ok(detail)) => println!("criterion 12 PASS  paper-scale reproduction: {detail}"),
            Some(Err(detail)) => println!("criterion 12 FAIL  paper-scale reproduction (not gating): {detail}"),
        }
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
}
