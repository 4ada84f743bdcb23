use proptest::prelude::*;

use sgscn::baselines::{kmeans_fit, KMeansConfig};
use sgscn::labels::{BinaryMask, LabelMap};
use sgscn::losses::{context_consistency, sparse_spatial, CentroidGradient, SpatialBounds};
use sgscn::metrics::{dsc, evaluate, hammoude, xor_measure};
use sgscn::tensor::{Tape, Tensor};
use sgscn::trainer::assign_labels;

fn mask_pair(n: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (prop::collection::vec(any::<bool>(), n * n), prop::collection::vec(any::<bool>(), n * n))
        .prop_map(move |(a, b)| (BinaryMask::new(n, n, a).unwrap(), BinaryMask::new(n, n, b).unwrap()))
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(data in prop::collection::vec(-20.0f64..20.0, 3 * 4 * 5), shift in -50.0f64..50.0) {
        let x = Tensor::new([3, 4, 5], data).unwrap();
        let y = x.map(|v| v + shift);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(y));
        let (pa, pb) = (tape.softmax_channels(a).unwrap(), tape.softmax_channels(b).unwrap());
        prop_assert!(tape.value(pa).max_abs_diff(tape.value(pb)) < 1e-9);
        // each pixel's distribution sums to one
        for p in 0..20 {
            let s: f64 = (0..3).map(|c| tape.value(pa).data()[c * 20 + p]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_identities((a, b) in mask_pair(8)) {
        prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        prop_assert_eq!(hammoude(&a, &b).unwrap(), hammoude(&b, &a).unwrap());
        let (d, h) = (dsc(&a, &b).unwrap(), hammoude(&a, &b).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(h >= 1.0 - d - 1e-15);
        if !b.is_empty() {
            prop_assert!(xor_measure(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn metrics_translation_invariant((a, b) in mask_pair(6), dy in 0usize..4, dx in 0usize..4) {
        let pad = |m: &BinaryMask| BinaryMask::from_fn(10, 10, |y, x| {
            y >= dy && x >= dx && y - dy < 6 && x - dx < 6 && m.data()[(y - dy) * 6 + x - dx]
        });
        prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&pad(&a), &pad(&b)).unwrap());
        prop_assert_eq!(hammoude(&a, &b).unwrap(), hammoude(&pad(&a), &pad(&b)).unwrap());
    }

    #[test]
    fn evaluate_report_is_consistent(labels in prop::collection::vec(0usize..5, 64), gt in prop::collection::vec(any::<bool>(), 64)) {
        prop_assume!(gt.iter().any(|&g| g));
        let r = evaluate(&LabelMap::new(8, 8, labels).unwrap(), &BinaryMask::new(8, 8, gt).unwrap()).unwrap();
        let d = 2.0 * r.tp as f64 / (2 * r.tp + r.fp + r.fn_) as f64;
        prop_assert!((r.dsc - d).abs() < 1e-12);
        prop_assert!((1.0 - r.dsc - (r.fp + r.fn_) as f64 / (2 * r.tp + r.fp + r.fn_) as f64).abs() < 1e-12);
    }

    #[test]
    fn argmax_labels_in_range(data in prop::collection::vec(-5.0f32..5.0, 7 * 3 * 4)) {
        let labels = assign_labels(&Tensor::new([7, 3, 4], data).unwrap()).unwrap();
        prop_assert!(labels.data().iter().all(|&l| l < 7));
    }

    #[test]
    fn spatial_losses_are_non_negative(data in prop::collection::vec(0.0f64..1.0, 2 * 5 * 5)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 5, 5], data.iter().map(|v| v + 1e-3).collect::<Vec<_>>()).unwrap());
        let ss = sparse_spatial(&mut tape, x, SpatialBounds::AllPairs, true).unwrap();
        let cc = context_consistency(&mut tape, x, true, CentroidGradient::Full).unwrap();
        prop_assert!(tape.value(ss).item() >= 0.0);
        prop_assert!(tape.value(cc).item() >= 0.0);
    }

    #[test]
    fn kmeans_partitions_pixels(data in prop::collection::vec(0.0f32..1.0, 3 * 6 * 6), k in 1usize..5, seed in 0u64..100) {
        let fit = kmeans_fit(&Tensor::new([3, 6, 6], data).unwrap(), &KMeansConfig::new(k).with_seed(seed)).unwrap();
        prop_assert_eq!(fit.labels.len(), 36);
        prop_assert!(fit.labels.iter().all(|&l| l < k));
        prop_assert!(fit.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn conv_keeps_spatial_size(h in 1usize..7, w in 1usize..7, c in 1usize..3) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::full([c, h, w], 0.5));
        let wt = tape.constant(Tensor::full([2, c, 3, 3], 0.1));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.conv2d(x, wt, b, 1, 1).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[2, h, w]);
    }
}
