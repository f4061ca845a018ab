mod common;

use std::collections::BTreeSet;

use common::{association_matches_brute_force, brute_force_pairs, rng, small_model, toy_dataset};
use mate::assoc::{
    associate_all, associate_cycles, associate_pair, association_metrics, cross_camera_prediction, k_cycle_associate,
    nominate, PredictionMatrix,
};
use mate::data::{IcsDataset, Identity, Sample, TestSplit};
use mate::net::{Layer, ModelParams};
use ndarray::{Array1, Array2};
use rand::Rng;

#[test]
fn matches_brute_force_on_small_two_camera_instances() {
    let mut checked_nonempty = 0;
    for seed in 0..40 {
        let mut r = rng(100 + seed);
        let n1 = r.random_range(2..=4);
        let n2 = r.random_range(2..=4);
        let ds = toy_dataset(&mut r, &[n1, n2], 3, 4, |p, k| (p * 10 + k) as u64);
        let params = small_model(&mut r, 4, 5, 3, &[n1, n2]);
        for tau in [0.0, 0.1, 0.3, 0.5] {
            assert!(association_matches_brute_force(&params, &ds, tau), "seed {seed} tau {tau}");
            if !brute_force_pairs(&params, &ds, tau).is_empty() {
                checked_nonempty += 1;
            }
        }
    }
    assert!(checked_nonempty > 20, "too few instances with accepted pairs: {checked_nonempty}");
}

#[test]
fn three_by_two_prediction_matches_per_image_loop() {
    let mut r = rng(31);
    let ds = toy_dataset(&mut r, &[3, 2], 4, 4, |p, k| (p * 10 + k) as u64);
    let params = small_model(&mut r, 4, 5, 3, &[3, 2]);
    let m = cross_camera_prediction(&params, &ds, 1, 2).unwrap();
    for k in 1..=3 {
        let images: Vec<&Sample> = ds.camera_samples(1).iter().filter(|s| s.label == k).collect();
        for l in 1..=2 {
            let mean: f64 =
                images.iter().map(|s| params.head_probs(2, &params.encode(&s.x).unwrap()).unwrap()[l - 1]).sum::<f64>()
                    / images.len() as f64;
            assert!((m.get(k, l) - mean).abs() <= 1e-12);
        }
        let row_sum: f64 = m.row(k).sum();
        assert!((row_sum - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn nominate_matches_linear_scan() {
    let mut r = rng(32);
    for _ in 0..200 {
        // Coarse values so ties actually occur.
        let row: Vec<f64> = (0..7).map(|_| r.random_range(0..5) as f64).collect();
        let total: f64 = row.iter().sum::<f64>().max(1.0);
        let row: Vec<f64> = row.iter().map(|v| v / total).collect();
        let m = PredictionMatrix::from_rows(1, 2, Array2::from_shape_vec((1, 7), row.clone()).unwrap()).unwrap();
        let mut best = 0;
        for i in 0..7 {
            if row[i] > row[best] {
                best = i;
            }
        }
        assert_eq!(nominate(&m, 1), (best + 1, row[best]));
    }
}

#[test]
fn pair_result_is_symmetric_in_camera_order() {
    let mut r = rng(33);
    let ds = toy_dataset(&mut r, &[4, 3, 2], 2, 4, |p, k| (p * 10 + k) as u64);
    let params = small_model(&mut r, 4, 5, 3, &[4, 3, 2]);
    for (p, q) in [(1, 2), (1, 3), (2, 3)] {
        assert_eq!(associate_pair(&params, &ds, p, q, 0.0).unwrap(), associate_pair(&params, &ds, q, p, 0.0).unwrap());
    }
    assert!(associate_pair(&params, &ds, 2, 2, 0.0).is_err());
}

#[test]
fn two_camera_cycles_reproduce_pairwise_association() {
    let mut r = rng(34);
    let ds = toy_dataset(&mut r, &[4, 3, 4], 2, 4, |p, k| (p * 10 + k) as u64);
    let params = small_model(&mut r, 4, 5, 3, &[4, 3, 4]);
    let tau = 0.05;
    let a = associate_all(&params, &ds, tau).unwrap();
    let (tuples, map) = associate_cycles(&params, &ds, 2, tau).unwrap();
    let from_pairs: BTreeSet<(Identity, Identity)> = a.pairs.iter().map(|p| (p.left(), p.right())).collect();
    let from_tuples: BTreeSet<(Identity, Identity)> = tuples.iter().map(|t| (t.members[0], t.members[1])).collect();
    assert_eq!(from_pairs, from_tuples);
    assert_eq!(map, a.multilabels);
}

/// One-hot inputs over global ids; each head scores its own identities'
/// global ids, so identities shared by two cameras are matched with high
/// confidence and the rest spread their mass evenly.
fn oracle_model_and_data() -> (ModelParams, IcsDataset) {
    let g = 6;
    let cameras: [&[u64]; 3] = [&[1, 2, 3, 4], &[3, 1, 5, 6], &[2, 6, 4]];
    let mut train = Vec::new();
    let mut id = 0;
    for (p0, gids) in cameras.iter().enumerate() {
        for (k0, &gid) in gids.iter().enumerate() {
            for _ in 0..2 {
                id += 1;
                let mut x = vec![0.0; g];
                x[gid as usize - 1] = 1.0;
                train.push(Sample { id, camera: p0 + 1, label: k0 + 1, global_id: Some(gid), x });
            }
        }
    }
    let sizes: Vec<usize> = cameras.iter().map(|c| c.len()).collect();
    let ds = IcsDataset::new(sizes, train, TestSplit::empty(3)).unwrap();
    let eye = Array2::<f64>::eye(g);
    let layer = || Layer { weight: eye.clone(), bias: Array1::zeros(g) };
    let heads = cameras
        .iter()
        .map(|gids| {
            let mut h = Array2::zeros((gids.len(), g));
            for (k0, &gid) in gids.iter().enumerate() {
                h[[k0, gid as usize - 1]] = 20.0;
            }
            h
        })
        .collect();
    (ModelParams::from_parts(vec![layer(), layer()], heads).unwrap(), ds)
}

#[test]
fn separable_model_recovers_ground_truth_pairs() {
    let (params, ds) = oracle_model_and_data();
    let a = associate_all(&params, &ds, 0.5).unwrap();
    let report = association_metrics(&a.pairs, &ds).unwrap();
    assert_eq!(report.ground_truth_pairs, 5);
    assert_eq!(report.predicted_pairs, 5);
    assert_eq!(report.precision, 1.0);
    assert_eq!(report.recall, 1.0);
    for set in a.multilabels.iter() {
        assert!(set.is_valid(3));
    }
}

#[test]
fn three_camera_cycle_on_separable_model() {
    let (params, ds) = oracle_model_and_data();
    let tuples = k_cycle_associate(&params, &ds, &[1, 2, 3], 0.5).unwrap();
    // No global id is visible in all three cameras.
    assert!(tuples.is_empty());
    let tuples = k_cycle_associate(&params, &ds, &[1, 3], 0.5).unwrap();
    let members: Vec<Vec<Identity>> = tuples.iter().map(|t| t.members.clone()).collect();
    assert_eq!(
        members,
        vec![vec![Identity::new(1, 2), Identity::new(3, 1)], vec![Identity::new(1, 4), Identity::new(3, 3)]]
    );
    assert!(k_cycle_associate(&params, &ds, &[1, 1], 0.5).is_err());
}
