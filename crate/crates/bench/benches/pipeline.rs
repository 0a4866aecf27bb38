use candle_core::DType;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use echobench_bench::{noise_frame, sam_candidates};
use echobench_core::models::{images_to_tensor, ModelSpec, SegmentationModel};
use echobench_core::preprocessing::{resize_bilinear, robust_normalize, NormalizationParams};
use echobench_core::pseudo_label::{filter_masks, merge_to_labelmap, ClassAssignment, FilterPolicy};
use echobench_core::{ModelKind, RunConfig};
use std::hint::black_box;

fn preprocessing(c: &mut Criterion) {
    let frame = noise_frame(512, 3);
    let params = NormalizationParams::default();
    c.bench_function("robust_normalize_512", |b| b.iter(|| robust_normalize(black_box(&frame), &params).unwrap()));
    c.bench_function("resize_512_to_256", |b| b.iter(|| resize_bilinear(black_box(frame.pixels()), 256, 256)));
}

fn pseudo_labels(c: &mut Criterion) {
    let candidates = sam_candidates(40, 128, 4);
    let policy = FilterPolicy::default();
    c.bench_function("filter_and_merge_40", |b| {
        b.iter(|| {
            let kept = filter_masks(black_box(&candidates), &policy);
            merge_to_labelmap(&kept, (128, 128), ClassAssignment::ByScore).unwrap()
        })
    });
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_128");
    group.sample_size(10);
    for kind in ModelKind::ALL {
        let cfg = RunConfig {
            model: kind,
            encoder_channels: vec![8, 16, 32, 64, 128],
            transformer_layers: 1,
            transformer_heads: 4,
            transformer_embed_dim: 64,
            transformer_max_tokens: 64,
            ..Default::default()
        };
        let spec: ModelSpec = cfg.model_spec();
        let model = SegmentationModel::new(&spec, DType::F32, 0).unwrap();
        let frames: Vec<_> = (0..2).map(|s| noise_frame(128, s).pixels().clone()).collect();
        let refs: Vec<_> = frames.iter().collect();
        group.bench_function(format!("{kind:?}"), |b| {
            b.iter_batched(
                || images_to_tensor(&refs, DType::F32).unwrap(),
                |x| model.forward(&x).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, preprocessing, pseudo_labels, forward);
criterion_main!(benches);
