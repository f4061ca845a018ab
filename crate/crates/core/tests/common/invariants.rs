//! Randomized structural checks shared by the property tests and the
//! acceptance suite.

use std::collections::BTreeSet;

use mate::assoc::associate_all;
use mate::data::Identity;
use mate::evalkit::{cmc, RankedList};
use mate::net::softmax;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::{rng, small_model, toy_dataset};

pub type Check = Result<(), TestCaseError>;

#[derive(Debug, Clone)]
pub struct AssocCase {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub tau: f64,
    pub people: u64,
}

pub fn assoc_case() -> impl Strategy<Value = AssocCase> {
    (any::<u64>(), prop::collection::vec(2usize..=5, 2..=4), 0.0..0.6f64, 3u64..=8)
        .prop_map(|(seed, sizes, tau, people)| AssocCase { seed, sizes, tau, people })
}

fn build(case: &AssocCase) -> (mate::net::ModelParams, mate::data::IcsDataset) {
    let mut r = rng(case.seed);
    let people = case.people;
    // Global ids drawn per (camera, label); collisions inside a camera are
    // harmless here because association never reads them.
    let ds = toy_dataset(&mut r, &case.sizes, 2, 4, |p, k| (p as u64 * 7 + k as u64 * 3) % people);
    let params = small_model(&mut r, 4, 5, 3, &case.sizes);
    (params, ds)
}

/// Each identity is matched at most once per other camera.
pub fn partial_matching(case: &AssocCase) -> Check {
    let (params, ds) = build(case);
    let a = associate_all(&params, &ds, case.tau).unwrap();
    let m = ds.num_cameras();
    for p in 1..=m {
        for q in p + 1..=m {
            let pairs: Vec<_> = a.pairs.iter().filter(|x| x.p == p && x.q == q).collect();
            let left: BTreeSet<usize> = pairs.iter().map(|x| x.k).collect();
            let right: BTreeSet<usize> = pairs.iter().map(|x| x.l).collect();
            prop_assert_eq!(left.len(), pairs.len());
            prop_assert_eq!(right.len(), pairs.len());
        }
    }
    for x in &a.pairs {
        prop_assert!(x.p < x.q);
        prop_assert!(x.psi > case.tau && x.psi <= 1.0);
    }
    Ok(())
}

/// `1 <= |Y| <= M`, the owner is a member and no camera repeats.
pub fn multilabel_bounds(case: &AssocCase) -> Check {
    let (params, ds) = build(case);
    let a = associate_all(&params, &ds, case.tau).unwrap();
    let m = ds.num_cameras();
    prop_assert_eq!(a.multilabels.len(), ds.identities().count());
    for set in a.multilabels.iter() {
        prop_assert!((1..=m).contains(&set.len()));
        prop_assert!(set.is_valid(m));
    }
    Ok(())
}

/// Raising the threshold only removes pairs.
pub fn tau_monotone(case: &AssocCase) -> Check {
    let (params, ds) = build(case);
    let key = |tau: f64| -> BTreeSet<(Identity, Identity)> {
        associate_all(&params, &ds, tau).unwrap().pairs.iter().map(|x| (x.left(), x.right())).collect()
    };
    let mut prev = key(case.tau);
    for step in 1..=4 {
        let next = key(case.tau + step as f64 * 0.1);
        prop_assert!(next.is_subset(&prev));
        prev = next;
    }
    Ok(())
}

pub fn cmc_case() -> impl Strategy<Value = (Vec<Option<usize>>, usize)> {
    (prop::collection::vec(prop::option::of(1usize..=30), 1..40), 1usize..=25)
}

/// CMC is nondecreasing in rank and lies in `[0, 1]`.
pub fn cmc_monotone(first_hits: &[Option<usize>], max_rank: usize) -> Check {
    let lists: Vec<RankedList> = first_hits
        .iter()
        .map(|h| RankedList {
            query_id: 0,
            gallery_ids: (1..=30).collect(),
            relevant: (1..=30).map(|i| Some(i) == *h).collect(),
        })
        .collect();
    let c = cmc(&lists, max_rank);
    prop_assert_eq!(c.len(), max_rank);
    for w in c.windows(2) {
        prop_assert!(w[0] <= w[1]);
    }
    prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    Ok(())
}

pub fn logits() -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-50.0..50.0f64, 1..12), prop::sample::select(vec![1.0, 10.0, 1e3]))
        .prop_map(|(v, scale)| v.into_iter().map(|x| x * scale).collect())
}

/// Finite, nonnegative, sums to one.
pub fn softmax_valid(logits: &[f64]) -> Check {
    let p = softmax(ndarray::ArrayView1::from(logits));
    prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
    prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
    Ok(())
}
