use echobench_core::losses::weighted_batch_loss;
use echobench_core::manifest::{normalize_stem, split_by_patient, Manifest};
use echobench_core::metrics::{confusion_matrix, dice_per_class, iou_per_class};
use echobench_core::pseudo_label::{decode_rle, encode_rle};
use echobench_core::training::{augment_arrays, clip_gradients, lr_at_epoch, AugmentParams};
use echobench_core::{BinaryMask, LabelMap, SampleRecord, SampleSource, Split};
use ndarray::Array2;
use proptest::prelude::*;

fn label_map(size: usize) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0u8..4, size * size)
        .prop_map(move |v| LabelMap::new(Array2::from_shape_vec((size, size), v).unwrap()).unwrap())
}

fn image(size: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(-5.0f32..5.0, size * size).prop_map(move |v| Array2::from_shape_vec((size, size), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flip_twice_is_identity(img in image(12), mask in label_map(12)) {
        let flip = AugmentParams { flip: true, angle_deg: 0.0 };
        let (a, m) = augment_arrays(&img, &mask, flip).unwrap();
        let (b, n) = augment_arrays(&a, &m, flip).unwrap();
        prop_assert_eq!(b, img);
        prop_assert_eq!(n, mask);
    }

    #[test]
    fn augmentation_is_a_function_of_its_seed(img in image(16), mask in label_map(16), seed in any::<u64>()) {
        let p = AugmentParams::from_seed(seed);
        prop_assert!(p.angle_deg.abs() <= 10.0);
        prop_assert_eq!(augment_arrays(&img, &mask, p).unwrap(), augment_arrays(&img, &mask, p).unwrap());
    }

    #[test]
    fn augmented_masks_keep_valid_labels(mask in label_map(16), seed in any::<u64>()) {
        let img = Array2::<f32>::zeros((16, 16));
        let (_, m) = augment_arrays(&img, &mask, AugmentParams::from_seed(seed)).unwrap();
        prop_assert!(m.labels().iter().all(|&v| v < 4));
    }

    #[test]
    fn overlap_scores_are_symmetric_and_bounded(a in label_map(10), b in label_map(10)) {
        let ab = confusion_matrix(&a, &b).unwrap();
        let ba = confusion_matrix(&b, &a).unwrap();
        prop_assert_eq!(dice_per_class(&ab), dice_per_class(&ba));
        for (d, j) in dice_per_class(&ab).into_iter().zip(iou_per_class(&ab)) {
            prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
            prop_assert!(j <= d);
            // Dice and IoU are related by D = 2J / (1 + J).
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        }
        let self_cm = confusion_matrix(&a, &a).unwrap();
        prop_assert_eq!(dice_per_class(&self_cm), [1.0; 4]);
    }

    #[test]
    fn weighted_loss_matches_direct_sum(pairs in prop::collection::vec((0.0f64..10.0, prop::sample::select(vec![1.0, 0.5])), 1..16)) {
        let (losses, weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let num: f64 = losses.iter().zip(&weights).map(|(l, w)| l * w).sum();
        let den: f64 = weights.iter().sum();
        prop_assert!((weighted_batch_loss(&losses, &weights).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn lr_is_constant_within_a_decay_stage(epoch in 0usize..60) {
        let stage_start = epoch / 10 * 10;
        prop_assert_eq!(lr_at_epoch(1e-4, epoch, 10, 0.1), lr_at_epoch(1e-4, stage_start, 10, 0.1));
        prop_assert!(lr_at_epoch(1e-4, stage_start + 10, 10, 0.1) < lr_at_epoch(1e-4, epoch, 10, 0.1));
    }

    #[test]
    fn clipping_never_grows_and_preserves_direction(g in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let (clipped, norm) = clip_gradients(std::slice::from_ref(&g), 1.0).unwrap();
        let after = clipped[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(after <= norm.min(1.0) + 1e-9);
        if norm > 0.0 {
            let scale = after / norm;
            for (a, b) in clipped[0].iter().zip(&g) {
                prop_assert!((a - b * scale).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rle_roundtrip(bits in prop::collection::vec(any::<bool>(), 7 * 9)) {
        let mask = BinaryMask::new(7, 9, bits).unwrap();
        prop_assert_eq!(decode_rle(&encode_rle(&mask), 7, 9).unwrap(), mask);
    }

    #[test]
    fn stem_normalization_is_idempotent(stem in "[a-z0-9]{1,8}(_[A-Z0-9]{1,4}){0,2}", suffix in prop::sample::select(vec!["", "_gt", "_mask", "_seg"]), ext in prop::sample::select(vec![".png", ".nii", ".nii.gz"])) {
        let once = normalize_stem(&format!("{stem}{suffix}{ext}"));
        prop_assert_eq!(normalize_stem(&once), once.clone());
        prop_assert_eq!(once, normalize_stem(&format!("{stem}{ext}")));
    }

    #[test]
    fn patient_split_is_leak_free(patients in prop::collection::vec(0u32..30, 3..80), seed in any::<u64>()) {
        let mut m = Manifest::empty("/data");
        for (i, p) in patients.iter().enumerate() {
            m.records.push(SampleRecord::new(format!("img/{i}.png"), format!("mask/{i}_gt.png"), SampleSource::GroundTruth, format!("patient{p:04}")));
        }
        let split = split_by_patient(&m, (0.7, 0.15, 0.15), seed).unwrap();
        let mut seen = std::collections::BTreeMap::new();
        for r in &split.records {
            let first = *seen.entry(r.patient_id.clone()).or_insert(r.split);
            prop_assert_eq!(first, r.split);
        }
        let again = split_by_patient(&m, (0.7, 0.15, 0.15), seed).unwrap();
        prop_assert_eq!(split, again);
        prop_assert!(seen.values().any(|s| *s == Split::Train));
    }
}
