use proptest::prelude::*;
use ulast_core::loss::weight_from_ratio;
use ulast_core::mask::{grid_overlap, region_mask_values, GridSpec};
use ulast_core::net::{decode_delta, encode_delta};
use ulast_core::runtime::{fuse_scores, MemoryEntry, MemoryQueue};
use ulast_core::{BoxF, Tensor};

fn boxes_on(n: f64) -> impl Strategy<Value = BoxF> {
    (0.0..n - 0.1, 0.0..n - 0.1, 0.05..n, 0.05..n)
        .prop_map(move |(x, y, w, h)| BoxF::new(x, y, (x + w).min(n + 1.0), (y + h).min(n + 1.0)))
}

proptest! {
    #[test]
    fn overlap_is_a_fraction_and_sums_to_clipped_area(b in boxes_on(9.0)) {
        let grid = GridSpec::new(9, 9, 1.0);
        let m = grid_overlap(&b, &grid).unwrap();
        prop_assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        let clipped = BoxF::new(b.x1.max(0.0), b.y1.max(0.0), b.x2.min(9.0), b.y2.min(9.0));
        let total: f64 = m.iter().sum();
        prop_assert!((total - clipped.area()).abs() < 1e-9);
    }

    #[test]
    fn mask_total_shrinks_with_threshold(
        bs in prop::collection::vec(boxes_on(9.0), 1..6),
        seed in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let grid = GridSpec::new(9, 9, 1.0);
        let scores = &seed[..bs.len()];
        let mut last = f64::INFINITY;
        for th in [0.0, 0.5, 0.9] {
            let t = region_mask_values(&bs, scores, th, &grid).unwrap().total();
            prop_assert!(t <= last);
            last = t;
        }
    }

    #[test]
    fn delta_round_trip(d in prop::array::uniform4(-3.0f64..3.0)) {
        let a = BoxF::from_center(31.5, 30.0, 16.0, 8.0);
        let e = encode_delta(&a, &decode_delta(&a, d));
        for k in 0..4 {
            prop_assert!((e[k] - d[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_is_nonnegative_and_monotone(r in 0.0f64..10.0, dr in 0.0f64..1.0) {
        let w = weight_from_ratio(r, 5.0, 7.0);
        prop_assert!(w >= 0.0);
        prop_assert!(weight_from_ratio(r + dr, 5.0, 7.0) <= w);
    }

    #[test]
    fn fusion_is_linear(l in prop::collection::vec(-5.0f64..5.0, 20), m in prop::collection::vec(-5.0f64..5.0, 20), lam in 0.0f64..1.0) {
        let f = fuse_scores(&l, &m, lam);
        for i in 0..20 {
            prop_assert!((f[i] - ((1.0 - lam) * l[i] + lam * m[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn queue_keeps_initial_and_best(scores in prop::collection::vec(0.0f64..1.0, 1..80), cap in 1usize..8) {
        let entry = |score: f64, frame: usize| MemoryEntry {
            feature: Tensor::zeros(&[1]),
            mask: Tensor::zeros(&[1]),
            score,
            frame,
        };
        let mut q = MemoryQueue::new(cap, entry(1.0, 0)).unwrap();
        for (i, s) in scores.iter().enumerate() {
            q.offer(entry(*s, i + 1));
            prop_assert!(q.len() <= cap);
            prop_assert_eq!(q.entries()[0].frame, 0);
        }
        // the kept non-initial entries are the best cap−1 offers
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let keep = (cap - 1).min(sorted.len());
        let mut kept: Vec<f64> = q.entries()[1..].iter().map(|e| e.score).collect();
        kept.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(kept, sorted[..keep].to_vec());
    }
}
