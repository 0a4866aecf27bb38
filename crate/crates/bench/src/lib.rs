//! Fixture generators shared by the benchmarks.

use echobench_core::{BinaryMask, FrameImage, FrameMeta, LabelMap, SamMaskCandidate, SourceFormat};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A label map of three nested discs plus `noise` random pixel flips.
pub fn disc_labels(size: usize, shift: f64, noise: usize, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = size as f64 / 2.0 + shift;
    let mut labels = Array2::from_shape_fn((size, size), |(r, col)| {
        let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt() / size as f64;
        match d {
            d if d < 0.12 => 1,
            d if d < 0.2 => 2,
            d if d < 0.3 => 3,
            _ => 0,
        }
    });
    for _ in 0..noise {
        let (r, col) = (rng.random_range(0..size), rng.random_range(0..size));
        labels[(r, col)] = rng.random_range(0..4);
    }
    LabelMap::new(labels).expect("labels are in range")
}

/// A frame of speckle-like noise in `[0, 4096)`.
pub fn noise_frame(size: usize, seed: u64) -> FrameImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Array2::from_shape_fn((size, size), |_| rng.random_range(0.0..4096.0f32));
    FrameImage::new(pixels, FrameMeta::new(SourceFormat::Png16)).expect("finite pixels")
}

/// `n` random rectangle candidates on a `size` x `size` grid.
pub fn sam_candidates(n: usize, size: usize, seed: u64) -> Vec<SamMaskCandidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (h, w) = (rng.random_range(1..size / 2), rng.random_range(1..size / 2));
            let (r0, c0) = (rng.random_range(0..size - h), rng.random_range(0..size - w));
            let bits = (0..size * size)
                .map(|k| {
                    let (r, c) = (k / size, k % size);
                    (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c)
                })
                .collect();
            let mask = BinaryMask::new(size, size, bits).expect("shape matches");
            SamMaskCandidate::new(mask, rng.random(), (h * w) as u64, rng.random(), i).expect("valid candidate")
        })
        .collect()
}
