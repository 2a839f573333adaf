use brainseg_core::dataset::{
    extract_slices, fuse_mask, is_informative, normalize_slice, resize_probability, restack_slices,
    split_subjects, Plane,
};
use brainseg_core::metrics::{aggregate, dice, iou, slice_counts, Aggregation, EmptyPolicy};
use brainseg_core::resample::bilinear;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn mask(n: usize) -> impl Strategy<Value = Array2<u8>> {
    proptest::collection::vec(0u8..3, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

fn prob_map(r: usize, c: usize) -> impl Strategy<Value = Array2<f32>> {
    // exact 0.5 shows up often so the strict boundary is exercised
    let value = prop_oneof![Just(0.5f32), Just(0.0), Just(1.0), 0.0f32..=1.0];
    proptest::collection::vec(value, r * c).prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
}

/// Straight per-pixel counting, written independently of the library.
fn oracle(pred: &Array2<u8>, gt: &Array2<u8>, class: u8) -> (f64, f64) {
    let (mut p, mut g, mut both, mut either) = (0u32, 0u32, 0u32, 0u32);
    for r in 0..pred.nrows() {
        for c in 0..pred.ncols() {
            let a = pred[[r, c]] == class;
            let b = gt[[r, c]] == class;
            if a {
                p += 1;
            }
            if b {
                g += 1;
            }
            if a && b {
                both += 1;
            }
            if a || b {
                either += 1;
            }
        }
    }
    if p + g == 0 {
        return (1.0, 1.0);
    }
    (2.0 * both as f64 / (p + g) as f64, both as f64 / either as f64)
}

proptest! {
    #[test]
    fn overlap_scores_match_counting_oracle(pred in mask(16), gt in mask(16)) {
        for class in 0..3u8 {
            let d = dice(pred.view(), gt.view(), class).unwrap();
            let j = iou(pred.view(), gt.view(), class).unwrap();
            let (od, oj) = oracle(&pred, &gt, class);
            prop_assert_eq!(d, od);
            prop_assert_eq!(j, oj);
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&d) && j <= d);
            prop_assert_eq!(d, dice(gt.view(), pred.view(), class).unwrap());
        }
    }

    #[test]
    fn self_overlap_is_perfect(m in mask(8)) {
        for class in 0..3u8 {
            prop_assert_eq!(dice(m.view(), m.view(), class).unwrap(), 1.0);
            prop_assert_eq!(iou(m.view(), m.view(), class).unwrap(), 1.0);
        }
    }

    #[test]
    fn aggregates_stay_in_unit_interval(pairs in proptest::collection::vec((mask(6), mask(6)), 1..6)) {
        let slices: Vec<_> = pairs.iter().map(|(p, g)| slice_counts(p.view(), g.view()).unwrap()).collect();
        for agg in [Aggregation::MacroForeground, Aggregation::MacroAll, Aggregation::Micro] {
            for policy in [EmptyPolicy::ScoreOne, EmptyPolicy::Exclude] {
                let r = aggregate("m", &slices, 0, agg, policy);
                prop_assert!((0.0..=1.0).contains(&r.overall_dice));
                prop_assert!(r.overall_iou <= r.overall_dice + 1e-12);
            }
        }
    }

    #[test]
    fn fusion_matches_per_pixel_rule(gm in prob_map(32, 32), wm in prob_map(32, 32)) {
        let label = fuse_mask(gm.view(), wm.view(), 0.5).unwrap();
        for ((r, c), &l) in label.indexed_iter() {
            let expected = if wm[[r, c]] > 0.5 { 2 } else if gm[[r, c]] > 0.5 { 1 } else { 0 };
            prop_assert_eq!(l, expected);
        }
    }

    #[test]
    fn raising_threshold_never_adds_tissue(gm in prob_map(12, 12), wm in prob_map(12, 12), t in 0.05f32..0.9) {
        let lo = fuse_mask(gm.view(), wm.view(), t).unwrap();
        let hi = fuse_mask(gm.view(), wm.view(), t + 0.05).unwrap();
        for (a, b) in lo.iter().zip(hi.iter()) {
            prop_assert!(*b == 0 || *a != 0);
        }
    }

    #[test]
    fn slicing_restacks_exactly(
        (nx, ny, nz) in (1usize..=16, 1usize..=17, 1usize..=18),
        seed in any::<u64>(),
    ) {
        let mut s = seed;
        let vol = Array3::from_shape_fn((nx, ny, nz), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / 7.0
        });
        let counts = [(Plane::Axial, nz), (Plane::Coronal, ny), (Plane::Sagittal, nx)];
        for (plane, n) in counts {
            let slices = extract_slices(&vol, plane);
            prop_assert_eq!(slices.len(), n);
            prop_assert_eq!(restack_slices(&slices, plane).unwrap(), vol.clone());
        }
    }

    #[test]
    fn resized_probabilities_stay_in_range(p in prob_map(7, 11), target in 1usize..40) {
        let out = resize_probability(p.view(), target).unwrap();
        prop_assert_eq!(out.dim(), (target, target));
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bilinear_preserves_constants(v in -5.0f32..5.0, r in 1usize..9, c in 1usize..9, t in 1usize..20) {
        let out = bilinear(Array2::from_elem((r, c), v).view(), t, t);
        prop_assert!(out.iter().all(|x| (x - v).abs() <= 1e-5 * v.abs().max(1.0)));
    }

    #[test]
    fn normalized_slices_span_unit_interval(p in prob_map(5, 5), scale in 0.5f32..100.0) {
        let n = normalize_slice(p.mapv(|v| v * scale).view());
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn splits_partition_ids(n in 0usize..200, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
        let s = split_subjects(&ids, (0.7, 0.15, 0.15), seed).unwrap();
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        prop_assert_eq!(all, ids.clone());
        prop_assert_eq!(s.train.len(), (n as f64 * 0.7 + 1e-9).floor() as usize);
        prop_assert_eq!(s, split_subjects(&ids, (0.7, 0.15, 0.15), seed).unwrap());
    }
}

#[test]
fn informative_threshold_is_inclusive() {
    let mut l = Array2::<u8>::zeros((10, 10));
    l[[0, 0]] = 1;
    assert!(is_informative(l.view(), 0.01));
    assert!(!is_informative(l.view(), 0.02));
}
