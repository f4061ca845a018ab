#![allow(dead_code)]

pub mod invariants;

use mate::data::{IcsDataset, Identity, Sample, TestSplit};
use mate::net::{EncoderConfig, ModelParams};
use mate::objective::{MiniBatch, MultiLabelMap, MultiLabelSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A tiny dataset with `sizes[p]` identities in camera `p + 1` and
/// `per_identity` random images each. Global ids follow `gid(p, k)`.
pub fn toy_dataset(
    rng: &mut impl Rng,
    sizes: &[usize],
    per_identity: usize,
    dim: usize,
    gid: impl Fn(usize, usize) -> u64,
) -> IcsDataset {
    let mut train = Vec::new();
    let mut id = 0;
    for (p0, &n) in sizes.iter().enumerate() {
        for k in 1..=n {
            for _ in 0..per_identity {
                id += 1;
                train.push(Sample {
                    id,
                    camera: p0 + 1,
                    label: k,
                    global_id: Some(gid(p0 + 1, k)),
                    x: random_vec(rng, dim),
                });
            }
        }
    }
    IcsDataset::new(sizes.to_vec(), train, TestSplit::empty(sizes.len())).unwrap()
}

pub fn small_model(rng: &mut impl Rng, d_in: usize, hidden: usize, d: usize, heads: &[usize]) -> ModelParams {
    let cfg = EncoderConfig { hidden: vec![hidden], feature_dim: d };
    let mut params = ModelParams::init(d_in, &cfg, heads, rng).unwrap();
    // Spread the weights so the softmax outputs are far from uniform.
    for w in params.components_mut() {
        *w += rng.random_range(-0.5..0.5);
    }
    params
}

pub fn full_batch(ds: &IcsDataset) -> MiniBatch {
    MiniBatch::new(ds.train_samples().cloned().collect(), ds.num_cameras()).unwrap()
}

/// Links identity `k` of camera 1 with identity `k` of camera 2 when both
/// exist and `link(k)` holds.
pub fn linked_multilabels(ds: &IcsDataset, link: impl Fn(usize) -> bool) -> MultiLabelMap {
    let mut map = MultiLabelMap::singletons(ds);
    let n = ds.label_space_size(1).unwrap().min(ds.label_space_size(2).unwrap());
    for k in (1..=n).filter(|&k| link(k)) {
        let (a, b) = (Identity::new(1, k), Identity::new(2, k));
        map.get_mut(a).unwrap().insert(b).unwrap();
        map.get_mut(b).unwrap().insert(a).unwrap();
    }
    map
}

pub fn set_of(owner: Identity, others: &[Identity]) -> MultiLabelSet {
    let mut s = MultiLabelSet::singleton(owner);
    for &o in others {
        s.insert(o).unwrap();
    }
    s
}

/// Largest relative error between the analytic gradient of `loss_total`
/// (lambda 0.5, some identities linked) and central differences with step
/// `eps`, on a random model with D_in=5, d=4 and two heads of 3 classes.
pub fn gradient_check(seed: u64, eps: f64) -> f64 {
    use mate::net::forward_backward;
    use mate::objective::loss_total;

    let mut r = rng(seed);
    let ds = toy_dataset(&mut r, &[3, 3], 2, 5, |p, k| (p * 10 + k) as u64);
    let params = small_model(&mut r, 5, 6, 4, &[3, 3]);
    let batch = full_batch(&ds);
    let ml = linked_multilabels(&ds, |k| k != 2);
    let lambda = 0.5;

    let (_, grads) = forward_backward(&params, &batch, &ml, lambda).unwrap();
    let analytic = grads.flatten();
    let n = params.flatten().len();
    assert_eq!(analytic.len(), n);

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        *plus.components_mut()[i] += eps;
        let mut minus = params.clone();
        *minus.components_mut()[i] -= eps;
        let numeric = (loss_total(&plus, &batch, &ml, lambda).unwrap()
            - loss_total(&minus, &batch, &ml, lambda).unwrap())
            / (2.0 * eps);
        let scale = a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

/// Camera-1/camera-2 association by enumeration of every `(k, l)` pair:
/// per-image softmax averaged per identity, first-index argmax in both
/// directions, product of the two probabilities strictly above `tau`.
pub fn brute_force_pairs(params: &ModelParams, ds: &IcsDataset, tau: f64) -> Vec<(usize, usize, f64)> {
    let mean_probs = |p: usize, q: usize| -> Vec<Vec<f64>> {
        let n_p = ds.label_space_size(p).unwrap();
        let n_q = ds.label_space_size(q).unwrap();
        let mut rows = vec![vec![0.0; n_q]; n_p];
        let mut counts = vec![0.0; n_p];
        for s in ds.camera_samples(p) {
            let f = params.encode(&s.x).unwrap();
            let probs = params.head_probs(q, &f).unwrap();
            for l in 0..n_q {
                rows[s.label - 1][l] += probs[l];
            }
            counts[s.label - 1] += 1.0;
        }
        for (row, c) in rows.iter_mut().zip(&counts) {
            for v in row.iter_mut() {
                *v /= c;
            }
        }
        rows
    };
    let argmax = |row: &[f64]| -> usize {
        let mut best = 0;
        for i in 1..row.len() {
            if row[i] > row[best] {
                best = i;
            }
        }
        best
    };
    let m12 = mean_probs(1, 2);
    let m21 = mean_probs(2, 1);
    let mut out = Vec::new();
    for k in 0..m12.len() {
        for l in 0..m21.len() {
            let psi = m12[k][l] * m21[l][k];
            if argmax(&m12[k]) == l && argmax(&m21[l]) == k && psi > tau {
                out.push((k + 1, l + 1, psi));
            }
        }
    }
    out
}

/// `true` when `associate_all` on a two-camera dataset returns exactly the
/// brute-force pairs with the same degrees (to 1e-12).
pub fn association_matches_brute_force(params: &ModelParams, ds: &IcsDataset, tau: f64) -> bool {
    let got = mate::assoc::associate_all(params, ds, tau).unwrap();
    let want = brute_force_pairs(params, ds, tau);
    let mut got: Vec<(usize, usize, f64)> = got.pairs.iter().map(|a| (a.k, a.l, a.psi)).collect();
    got.sort_by_key(|t| (t.0, t.1));
    got.len() == want.len()
        && got.iter().zip(&want).all(|(a, b)| a.0 == b.0 && a.1 == b.1 && (a.2 - b.2).abs() <= 1e-12)
}
