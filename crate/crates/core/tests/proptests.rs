mod common;

use common::invariants::{
    assoc_case, cmc_case, cmc_monotone, logits, multilabel_bounds, partial_matching, softmax_valid, tau_monotone,
};
use common::{rng, small_model, toy_dataset};
use mate::assoc::{associate_pair, curriculum_threshold, CurriculumSchedule};
use mate::evalkit::{rank, FeatureTable};
use mate::trainer::{balanced_minibatch, SamplerConfig};
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn association_is_a_partial_matching(case in assoc_case()) {
        partial_matching(&case)?;
    }

    #[test]
    fn multilabel_sets_stay_within_bounds(case in assoc_case()) {
        multilabel_bounds(&case)?;
    }

    #[test]
    fn pair_set_shrinks_as_threshold_rises(case in assoc_case()) {
        tau_monotone(&case)?;
    }

    #[test]
    fn cmc_is_monotone((hits, k) in cmc_case()) {
        cmc_monotone(&hits, k)?;
    }

    #[test]
    fn softmax_is_a_distribution(v in logits()) {
        softmax_valid(&v)?;
    }

    #[test]
    fn pair_association_ignores_argument_order(seed in any::<u64>(), n1 in 2usize..=5, n2 in 2usize..=5, tau in 0.0..0.5f64) {
        let mut r = rng(seed);
        let ds = toy_dataset(&mut r, &[n1, n2], 2, 3, |p, k| (p * 10 + k) as u64);
        let params = small_model(&mut r, 3, 4, 3, &[n1, n2]);
        prop_assert_eq!(associate_pair(&params, &ds, 1, 2, tau).unwrap(), associate_pair(&params, &ds, 2, 1, tau).unwrap());
    }

    #[test]
    fn ranking_is_invariant_to_positive_scaling(
        rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 2..12),
        q in prop::collection::vec(-5.0..5.0f64, 3),
        scale in 0.01..100.0f64,
    ) {
        let n = rows.len();
        let make = |rows: &[Vec<f64>], s: f64| FeatureTable {
            ids: (1..=rows.len() as u64).collect(),
            cameras: vec![2; rows.len()],
            global_ids: (0..rows.len() as u64).map(|i| Some(i % 2)).collect(),
            features: Array2::from_shape_vec((rows.len(), 3), rows.concat()).unwrap() * s,
        };
        let query = |s: f64| FeatureTable {
            ids: vec![0],
            cameras: vec![1],
            global_ids: vec![Some(0)],
            features: Array2::from_shape_vec((1, 3), q.clone()).unwrap() * s,
        };
        let (qa, qb) = (query(1.0), query(scale));
        let a = rank(qa.entry(0), &make(&rows, 1.0)).unwrap().unwrap();
        let b = rank(qb.entry(0), &make(&rows, scale)).unwrap().unwrap();
        prop_assert_eq!(a.relevant, b.relevant);
        prop_assert_eq!(a.gallery_ids.len(), n);
    }

    #[test]
    fn threshold_is_monotone_and_bounded(lower in 0.0..0.99f64, gap in 0.0..1.0f64, rounds in 1usize..30) {
        let upper = lower + gap * (1.0 - lower);
        let sched = CurriculumSchedule { tau_lower: lower, tau_upper: upper, rounds };
        let mut prev = f64::NEG_INFINITY;
        for r in 0..rounds {
            let t = curriculum_threshold(&sched, r).unwrap();
            prop_assert!(t >= prev && t >= lower && t <= upper.max(lower));
            prev = t;
        }
        prop_assert!(curriculum_threshold(&sched, rounds).is_err());
    }

    #[test]
    fn batches_are_balanced_across_cameras(seed in any::<u64>(), sizes in prop::collection::vec(2usize..=6, 1..=4), ids in 1usize..=3, imgs in 1usize..=5) {
        let mut r = rng(seed);
        let ds = toy_dataset(&mut r, &sizes, 3, 2, |p, k| (p * 10 + k) as u64);
        let cfg = SamplerConfig { identities_per_camera: ids, images_per_identity: imgs };
        let batch = balanced_minibatch(&ds, &cfg, &mut r).unwrap();
        prop_assert_eq!(batch.len(), sizes.len() * ids * imgs);
        prop_assert!(batch.per_camera_counts().iter().all(|&c| c == ids * imgs));
        for p in 1..=sizes.len() {
            let labels: std::collections::BTreeSet<usize> =
                batch.samples().iter().filter(|s| s.camera == p).map(|s| s.label).collect();
            prop_assert_eq!(labels.len(), ids.min(sizes[p - 1]));
        }
    }
}
