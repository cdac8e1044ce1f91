use num_rational::Ratio;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rarequery_core::engine::{ensemble_score, select_training_set, EnsembleWeights};
use rarequery_core::experiments::{split_labels, SplitSpec};
use rarequery_core::mapping::{kmeans_with_restarts, merge_points, DetectionPoint};
use rarequery_core::ranking::{rank_by_metric, Target};
use rarequery_core::tilestore::{
    crop_orthomosaics, load_tileset, save_tileset, Band, CropGeometry, Label, MiddenRegistry,
    Orthomosaic,
};

/// Window origins counted one by one.
fn enumerate_windows(length: u32, interval: u32, stride: u32) -> usize {
    let mut n = 0;
    let mut x0 = 0;
    while x0 + interval <= length {
        n += 1;
        x0 += stride;
    }
    n
}

fn mosaic(side_px: usize, seed: u64) -> Orthomosaic {
    let pixels = (0..side_px * side_px)
        .map(|i| ((i as u64 * 2654435761 + seed) % 97) as f32 / 10.0)
        .collect();
    Orthomosaic::new(Band::Thermal, 1.0, side_px, side_px, (0.0, 0.0), pixels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_count_matches_enumeration(length in 1u32..400, interval in 1u32..60, raw_stride in 0u32..30) {
        let stride = 1 + raw_stride % interval;
        let geom = CropGeometry::new(interval as f64, stride as f64).unwrap();
        prop_assert_eq!(geom.tiles_per_axis(length as f64), enumerate_windows(length, interval, stride));
    }

    #[test]
    fn cropped_tileset_has_square_count(side in 4usize..40, interval in 2u32..8, raw_stride in 0u32..6) {
        let stride = 1 + raw_stride % interval;
        let geom = CropGeometry::new(interval as f64, stride as f64).unwrap();
        let ts = crop_orthomosaics(&[mosaic(side, 1)], geom, None).unwrap();
        let per_axis = enumerate_windows(side as u32, interval, stride);
        prop_assert_eq!(ts.len(), per_axis * per_axis);
        prop_assert!(ts.tiles.iter().enumerate().all(|(i, t)| t.id == i));
    }

    #[test]
    fn rank_is_a_stable_permutation(metrics in prop::collection::vec(0u8..20, 1..200)) {
        let m: Vec<f64> = metrics.iter().map(|&v| v as f64).collect();
        let order = rank_by_metric(m.clone(), Target::DatasetMax).unwrap();
        let mut sorted = order.ids.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..m.len()).collect::<Vec<_>>());
        for w in order.ids.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(m[a] > m[b] || (m[a] == m[b] && a < b));
        }
    }

    #[test]
    fn weights_sum_to_one_exactly(counts in prop::collection::vec(0u64..1000, 1..6)) {
        let w = EnsembleWeights::from_counts(counts.clone(), &EnsembleWeights::uniform(counts.len()));
        let total: Ratio<u64> = w.ratios().into_iter().fold(Ratio::from_integer(0), |a, b| a + b);
        prop_assert_eq!(total, Ratio::from_integer(1));
        prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_convex_combination(outputs in prop::collection::vec(0.0f64..=1.0, 1..5), raw in prop::collection::vec(1u64..100, 5)) {
        let counts: Vec<u64> = raw[..outputs.len()].to_vec();
        let w = EnsembleWeights::from_counts(counts, &EnsembleWeights::uniform(outputs.len()));
        let s = ensemble_score(&outputs, &w.weights).unwrap();
        let lo = outputs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = outputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.positive >= lo - 1e-12 && s.positive <= hi + 1e-12);
        prop_assert!((s.positive + s.negative - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_set_is_balanced(labels in prop::collection::vec(any::<bool>(), 1..80), seed in any::<u64>()) {
        let labeled: Vec<(usize, bool)> = labels.iter().copied().enumerate().collect();
        let set = select_training_set(&labeled, &mut ChaCha8Rng::seed_from_u64(seed));
        let p = labels.iter().filter(|y| **y).count();
        let n = labels.len() - p;
        let sp = set.iter().filter(|t| t.1).count();
        if p == 0 {
            prop_assert_eq!(set.len(), labels.len());
        } else {
            prop_assert_eq!(sp, p);
            prop_assert_eq!(set.len() - sp, p.min(n));
        }
        let mut ids: Vec<usize> = set.iter().map(|t| t.0).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), set.len());
    }

    #[test]
    fn split_is_disjoint_and_balanced(p in 2usize..60, n in 120usize..400, seed in any::<u64>(), balance in any::<bool>()) {
        let mut labels = vec![Label::Negative; n];
        labels.extend(vec![Label::Positive; p]);
        let spec = SplitSpec { positive_train_fraction: 0.8, balance_train: balance, seed };
        let s = split_labels(&labels, &spec).unwrap();
        let train_pos = (0.8 * p as f64).floor() as usize;
        let test_pos = p - train_pos;
        prop_assert_eq!(s.test.len(), 2 * test_pos);
        prop_assert_eq!(s.test_labels.iter().filter(|y| **y).count(), test_pos);
        prop_assert!(s.train.iter().all(|id| !s.test.contains(id)));
        let expected_train = if balance { 2 * train_pos } else { p + n - 2 * test_pos };
        prop_assert_eq!(s.train.len(), expected_train);
    }

    #[test]
    fn merging_is_idempotent(pts in prop::collection::vec((0.0f64..200.0, 0.0f64..200.0, 0.0f64..1.0), 0..40), radius in 1.0f64..30.0) {
        let points: Vec<DetectionPoint> = pts.iter().map(|&(x, y, c)| DetectionPoint::new(x, y, c)).collect();
        let once = merge_points(points.clone(), radius);
        let twice = merge_points(once.clone(), radius);
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.iter().map(|p| p.weight).sum::<usize>(), points.len());
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!((a.x - b.x).hypot(a.y - b.y) > radius);
            }
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(pts in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 3..60), k in 1usize..6, seed in any::<u64>()) {
        prop_assume!(pts.len() >= k);
        let points: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
        let r = kmeans_with_restarts(&points, k, seed, 1).unwrap();
        prop_assert!(r.iterations <= 300);
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
        }
        // Converged centroids are the means of their members.
        for c in 0..k {
            let members: Vec<&[f64; 2]> = points.iter().zip(&r.assignments).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            prop_assert!(!members.is_empty());
            let mx = members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64;
            let my = members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64;
            if r.iterations < 300 {
                prop_assert!((mx - r.centroids[c][0]).abs() < 1e-9 && (my - r.centroids[c][1]).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tileset_round_trips(side in 8usize..30, seed in any::<u64>(), cx in 0.0f64..8.0, cy in 0.0f64..8.0) {
        let geom = CropGeometry::new(4.0, 2.0).unwrap();
        let registry = MiddenRegistry { centers: vec![(cx, cy)] };
        let ts = crop_orthomosaics(&[mosaic(side, seed)], geom, Some(&registry)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_tileset(&ts, dir.path()).unwrap();
        let back = load_tileset(dir.path()).unwrap();
        prop_assert_eq!(back, ts);
    }
}
