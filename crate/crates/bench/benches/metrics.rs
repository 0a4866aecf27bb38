use criterion::{criterion_group, criterion_main, Criterion};
use echobench_bench::disc_labels;
use echobench_core::metrics::{average_surface_distance, confusion_matrix, dice_per_class, hausdorff_distance};
use std::hint::black_box;

fn overlap(c: &mut Criterion) {
    let gt = disc_labels(256, 0.0, 0, 1);
    let pred = disc_labels(256, 3.0, 500, 2);
    c.bench_function("confusion_dice_256", |b| {
        b.iter(|| dice_per_class(&confusion_matrix(black_box(&pred), black_box(&gt)).unwrap()))
    });
}

fn boundary(c: &mut Criterion) {
    let gt = disc_labels(256, 0.0, 0, 1);
    let pred = disc_labels(256, 3.0, 500, 2);
    c.bench_function("hausdorff_256", |b| b.iter(|| hausdorff_distance(black_box(&pred), black_box(&gt), 2).unwrap()));
    c.bench_function("asd_256", |b| {
        b.iter(|| average_surface_distance(black_box(&pred), black_box(&gt), 2).unwrap())
    });
}

criterion_group!(benches, overlap, boundary);
criterion_main!(benches);
