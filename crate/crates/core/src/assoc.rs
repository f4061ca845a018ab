//! Cross-camera identity association.
//!
//! For a camera pair `(p, q)` every identity `k` of camera `p` is projected
//! through camera `q`'s head by averaging the head's softmax over all images
//! of `k`. The argmax `l*` is nominated, the reverse projection of `l*` must
//! nominate `k` again (cycle consistency), and the pair is accepted only when
//! the product of both directional probabilities exceeds a threshold that is
//! annealed over training rounds. Accepted pairs become extra labels.
//!
//! The same chain of argmax nominations generalizes to cycles through more
//! than two cameras, see [`k_cycle_associate`].

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{IcsDataset, Identity};
use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::objective::MultiLabelMap;

/// Row `k` is the mean camera-`target` head distribution over all images of
/// identity `k` in camera `source`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    source: usize,
    target: usize,
    probs: Array2<f64>,
}

impl PredictionMatrix {
    /// Wraps an `N_source x N_target` row-stochastic matrix.
    pub fn from_rows(source: usize, target: usize, probs: Array2<f64>) -> Result<Self> {
        for (k, row) in probs.rows().into_iter().enumerate() {
            let sum = row.sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!("row {} is not a distribution (sum {sum})", k + 1)));
            }
        }
        Ok(Self { source, target, probs })
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Row for 1-based identity `k` of the source camera.
    pub fn row(&self, k: usize) -> ArrayView1<'_, f64> {
        self.probs.row(k - 1)
    }

    /// Probability that source identity `k` matches target identity `l`.
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.probs[[k - 1, l - 1]]
    }
}

fn camera_features(params: &ModelParams, ds: &IcsDataset, camera: usize) -> Result<Array2<f64>> {
    params.encode_batch(ds.camera_matrix(camera).view())
}

fn prediction_from_features(
    params: &ModelParams,
    ds: &IcsDataset,
    features: &Array2<f64>,
    p: usize,
    q: usize,
) -> Result<PredictionMatrix> {
    let probs = params.head_probs_batch(q, features.view())?;
    let n_p = ds.label_space_size(p)?;
    let mut out = Array2::zeros((n_p, probs.ncols()));
    for k in 1..=n_p {
        let idx = ds.identity_indices(Identity::new(p, k));
        let mean = probs.select(Axis(0), idx).mean_axis(Axis(0)).expect("identity has images");
        out.row_mut(k - 1).assign(&mean);
    }
    Ok(PredictionMatrix { source: p, target: q, probs: out })
}

fn check_pair(params: &ModelParams, ds: &IcsDataset, p: usize, q: usize) -> Result<()> {
    ds.check_camera(p)?;
    ds.check_camera(q)?;
    params.head(p)?;
    params.head(q)?;
    if p == q {
        return Err(Error::Config(format!("cross-camera prediction needs two distinct cameras, got {p} twice")));
    }
    Ok(())
}

/// Mean head-`q` distribution of every camera-`p` identity.
pub fn cross_camera_prediction(params: &ModelParams, ds: &IcsDataset, p: usize, q: usize) -> Result<PredictionMatrix> {
    check_pair(params, ds, p, q)?;
    let features = camera_features(params, ds, p)?;
    prediction_from_features(params, ds, &features, p, q)
}

/// Argmax of row `k` (1-based), smallest index on ties. Panics if `k` is
/// outside the source label space.
pub fn nominate(m: &PredictionMatrix, k: usize) -> (usize, f64) {
    let mut best = (1, f64::NEG_INFINITY);
    for (i, &v) in m.row(k).iter().enumerate() {
        if v > best.1 {
            best = (i + 1, v);
        }
    }
    best
}

/// Cycle-consistent nomination for identity `k` of `m_pq`'s source camera:
/// `Some((l*, psi))` when `l*`'s own nomination points back at `k`, with
/// `psi = m_pq[k][l*] * m_qp[l*][k]`.
pub fn cyclic_pair(m_pq: &PredictionMatrix, m_qp: &PredictionMatrix, k: usize) -> Option<(usize, f64)> {
    let (l, forward) = nominate(m_pq, k);
    let (t, backward) = nominate(m_qp, l);
    (t == k).then_some((l, forward * backward))
}

/// Annealing schedule for the association threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub rounds: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self { tau_lower: 0.5, tau_upper: 0.95, rounds: 10 }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.tau_lower && self.tau_lower <= self.tau_upper && self.tau_upper <= 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= tau_lower ({}) <= tau_upper ({}) <= 1",
                self.tau_lower, self.tau_upper
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("schedule needs at least one round".into()));
        }
        Ok(())
    }
}

/// `min(tau_upper, tau_lower + r / (R - 1) * (1 - tau_lower))` for round
/// `r` in `0..R`. A single-round schedule uses `tau_lower`.
pub fn curriculum_threshold(sched: &CurriculumSchedule, round: usize) -> Result<f64> {
    sched.validate()?;
    if round >= sched.rounds {
        return Err(Error::Config(format!("round {round} outside 0..{}", sched.rounds)));
    }
    if sched.rounds == 1 {
        return Ok(sched.tau_lower);
    }
    let ramp = sched.tau_lower + round as f64 / (sched.rounds - 1) as f64 * (1.0 - sched.tau_lower);
    Ok(sched.tau_upper.min(ramp))
}

/// An accepted match between identity `k` of camera `p` and identity `l` of
/// camera `q`, stored with `p < q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationPair {
    pub p: usize,
    pub k: usize,
    pub q: usize,
    pub l: usize,
    pub psi: f64,
}

impl AssociationPair {
    fn canonical(p: usize, k: usize, q: usize, l: usize, psi: f64) -> Self {
        if p < q {
            Self { p, k, q, l, psi }
        } else {
            Self { p: q, k: l, q: p, l: k, psi }
        }
    }

    pub fn left(&self) -> Identity {
        Identity::new(self.p, self.k)
    }

    pub fn right(&self) -> Identity {
        Identity::new(self.q, self.l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub pairs: Vec<AssociationPair>,
    pub multilabels: MultiLabelMap,
}

fn pairs_from_matrices(m_pq: &PredictionMatrix, m_qp: &PredictionMatrix, tau: f64) -> Vec<AssociationPair> {
    let (p, q) = (m_pq.source, m_pq.target);
    let mut pairs: Vec<AssociationPair> = (1..=m_pq.probs.nrows())
        .filter_map(|k| {
            let (l, psi) = cyclic_pair(m_pq, m_qp, k)?;
            (psi > tau).then(|| AssociationPair::canonical(p, k, q, l, psi))
        })
        .collect();
    pairs.sort_by_key(|a| (a.p, a.k));
    pairs
}

/// Accepted pairs for one camera pair, in canonical form sorted by the
/// lower camera's identity. The result does not depend on argument order.
pub fn associate_pair(
    params: &ModelParams,
    ds: &IcsDataset,
    p: usize,
    q: usize,
    tau: f64,
) -> Result<Vec<AssociationPair>> {
    check_pair(params, ds, p, q)?;
    let m_pq = cross_camera_prediction(params, ds, p, q)?;
    let m_qp = cross_camera_prediction(params, ds, q, p)?;
    Ok(pairs_from_matrices(&m_pq, &m_qp, tau))
}

fn all_camera_features(params: &ModelParams, ds: &IcsDataset) -> Result<Vec<Array2<f64>>> {
    (1..=ds.num_cameras()).into_par_iter().map(|p| camera_features(params, ds, p)).collect()
}

/// Runs cyclic association with threshold `tau` (strict `psi > tau`) over
/// every camera pair `p < q` and derives the multi-label sets.
pub fn associate_all(params: &ModelParams, ds: &IcsDataset, tau: f64) -> Result<Association> {
    let m = ds.num_cameras();
    if params.num_heads() != m {
        return Err(Error::Dimension { expected: m, found: params.num_heads() });
    }
    let features = all_camera_features(params, ds)?;
    let camera_pairs: Vec<(usize, usize)> = (1..=m).flat_map(|p| (p + 1..=m).map(move |q| (p, q))).collect();
    let per_pair: Vec<Vec<AssociationPair>> = camera_pairs
        .par_iter()
        .map(|&(p, q)| {
            let m_pq = prediction_from_features(params, ds, &features[p - 1], p, q)?;
            let m_qp = prediction_from_features(params, ds, &features[q - 1], q, p)?;
            Ok(pairs_from_matrices(&m_pq, &m_qp, tau))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<AssociationPair> = per_pair.into_iter().flatten().collect();

    let mut multilabels = MultiLabelMap::singletons(ds);
    for a in &pairs {
        let (left, right) = (a.left(), a.right());
        multilabels.get_mut(left).expect("identity exists").insert(right)?;
        multilabels.get_mut(right).expect("identity exists").insert(left)?;
    }
    Ok(Association { pairs, multilabels })
}

/// Identities matched around a camera cycle, listed in cycle order, with the
/// product of the link probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTuple {
    pub members: Vec<Identity>,
    pub degree: f64,
}

impl CycleTuple {
    /// Same cycle rotated to start at its lowest camera.
    pub fn canonical(&self) -> CycleTuple {
        let start = (0..self.members.len()).min_by_key(|&i| self.members[i].camera).unwrap_or(0);
        let mut members = self.members.clone();
        members.rotate_left(start);
        CycleTuple { members, degree: self.degree }
    }
}

fn check_cycle(ds: &IcsDataset, cycle: &[usize]) -> Result<()> {
    if cycle.len() < 2 {
        return Err(Error::Config("a camera cycle needs at least 2 cameras".into()));
    }
    if cycle.len() > ds.num_cameras() {
        return Err(Error::Config(format!(
            "cycle of {} cameras requested but the dataset has only {}",
            cycle.len(),
            ds.num_cameras()
        )));
    }
    for &c in cycle {
        ds.check_camera(c)?;
    }
    let distinct: BTreeSet<usize> = cycle.iter().copied().collect();
    if distinct.len() != cycle.len() {
        return Err(Error::Config(format!("camera cycle {cycle:?} repeats a camera")));
    }
    Ok(())
}

fn cycles_from_matrices(cycle: &[usize], links: &[PredictionMatrix], tau: f64) -> Vec<CycleTuple> {
    let n_start = links[0].probs.nrows();
    let mut out = Vec::new();
    for k in 1..=n_start {
        let mut members = Vec::with_capacity(cycle.len());
        let mut degree = 1.0;
        let mut current = k;
        for (i, link) in links.iter().enumerate() {
            members.push(Identity::new(cycle[i], current));
            let (next, prob) = nominate(link, current);
            degree *= prob;
            current = next;
        }
        if current == k && degree > tau {
            out.push(CycleTuple { members, degree });
        }
    }
    out
}

/// Chains argmax nominations `c_1 -> c_2 -> ... -> c_n -> c_1` from every
/// identity of the first camera and keeps the chains that return to their
/// start with degree (product of link probabilities) above `tau`.
pub fn k_cycle_associate(params: &ModelParams, ds: &IcsDataset, cycle: &[usize], tau: f64) -> Result<Vec<CycleTuple>> {
    check_cycle(ds, cycle)?;
    let links = cycle
        .iter()
        .zip(cycle.iter().cycle().skip(1))
        .map(|(&a, &b)| cross_camera_prediction(params, ds, a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(cycles_from_matrices(cycle, &links, tau))
}

/// Every ascending combination of `length` cameras out of `1..=cameras`.
pub fn camera_cycles(cameras: usize, length: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, cameras: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for c in start..=cameras {
            cur.push(c);
            rec(c + 1, cameras, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if length >= 1 && length <= cameras {
        rec(1, cameras, length, &mut Vec::new(), &mut out);
    }
    out
}

/// Turns cycle tuples into multi-label sets: every member receives the
/// labels of all other members. Tuples are applied in order of decreasing
/// degree; one that would give an identity a second label from some camera
/// is skipped entirely.
pub fn multilabels_from_tuples(ds: &IcsDataset, tuples: &[CycleTuple]) -> MultiLabelMap {
    let mut order: Vec<&CycleTuple> = tuples.iter().collect();
    order.sort_by(|a, b| b.degree.total_cmp(&a.degree));
    let mut map = MultiLabelMap::singletons(ds);
    for t in order {
        let fits = t.members.iter().all(|owner| {
            let set = map.get(*owner).expect("identity exists");
            t.members.iter().all(|l| set.labels().contains(l) || set.labels().iter().all(|x| x.camera != l.camera))
        });
        if !fits {
            continue;
        }
        for owner in &t.members {
            let set = map.get_mut(*owner).expect("identity exists");
            for l in &t.members {
                set.insert(*l).expect("checked for conflicts");
            }
        }
    }
    map
}

/// Runs [`k_cycle_associate`] over every ascending camera combination of the
/// given length. For length 2 this reproduces [`associate_all`].
pub fn associate_cycles(
    params: &ModelParams,
    ds: &IcsDataset,
    length: usize,
    tau: f64,
) -> Result<(Vec<CycleTuple>, MultiLabelMap)> {
    if length < 2 || length > ds.num_cameras() {
        return Err(Error::Config(format!("cycle length {length} not available with {} cameras", ds.num_cameras())));
    }
    let features = all_camera_features(params, ds)?;
    let cycles = camera_cycles(ds.num_cameras(), length);
    let per_cycle: Vec<Vec<CycleTuple>> = cycles
        .par_iter()
        .map(|cycle| {
            let links = cycle
                .iter()
                .zip(cycle.iter().cycle().skip(1))
                .map(|(&a, &b)| prediction_from_features(params, ds, &features[a - 1], a, b))
                .collect::<Result<Vec<_>>>()?;
            Ok(cycles_from_matrices(cycle, &links, tau))
        })
        .collect::<Result<_>>()?;
    let tuples: Vec<CycleTuple> = per_cycle.into_iter().flatten().collect();
    let map = multilabels_from_tuples(ds, &tuples);
    Ok((tuples, map))
}

/// Counts of predicted, correct and ground-truth matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub ground_truth_pairs: usize,
    pub predicted_pairs: usize,
    pub correct_pairs: usize,
    pub precision: f64,
    pub recall: f64,
}

impl AssociationReport {
    /// Precision is 1 with no predictions; recall is 1 with no ground truth.
    pub fn from_counts(ground_truth_pairs: usize, predicted_pairs: usize, correct_pairs: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        Self {
            ground_truth_pairs,
            predicted_pairs,
            correct_pairs,
            precision: ratio(correct_pairs, predicted_pairs),
            recall: ratio(correct_pairs, ground_truth_pairs),
        }
    }
}

/// Hidden-identity lookup `camera -> global id -> label`.
fn global_index(ds: &IcsDataset) -> Result<Vec<BTreeMap<u64, usize>>> {
    (1..=ds.num_cameras())
        .map(|p| (1..=ds.label_space_sizes()[p - 1]).map(|k| Ok((ds.global_id_of(Identity::new(p, k))?, k))).collect())
        .collect()
}

/// Scores pairwise associations against hidden identities. A ground-truth
/// pair is any two identities in different cameras sharing a global id.
pub fn association_metrics(pairs: &[AssociationPair], ds: &IcsDataset) -> Result<AssociationReport> {
    let index = global_index(ds)?;
    let m = ds.num_cameras();
    let mut ground_truth = 0;
    for p in 1..=m {
        for q in p + 1..=m {
            ground_truth += index[p - 1].keys().filter(|g| index[q - 1].contains_key(g)).count();
        }
    }
    let mut correct = 0;
    for a in pairs {
        if ds.global_id_of(a.left())? == ds.global_id_of(a.right())? {
            correct += 1;
        }
    }
    Ok(AssociationReport::from_counts(ground_truth, pairs.len(), correct))
}

/// Scores cycle tuples. A tuple is correct when all members share a global
/// id; the ground truth for a camera cycle is the number of people visible
/// in every camera of it.
pub fn cycle_metrics(tuples: &[CycleTuple], ds: &IcsDataset, cycles: &[Vec<usize>]) -> Result<AssociationReport> {
    let index = global_index(ds)?;
    let mut ground_truth = 0;
    for cycle in cycles {
        check_cycle(ds, cycle)?;
        ground_truth +=
            index[cycle[0] - 1].keys().filter(|g| cycle[1..].iter().all(|&c| index[c - 1].contains_key(g))).count();
    }
    let mut correct = 0;
    for t in tuples {
        let gids = t.members.iter().map(|&i| ds.global_id_of(i)).collect::<Result<BTreeSet<_>>>()?;
        if gids.len() == 1 {
            correct += 1;
        }
    }
    Ok(AssociationReport::from_counts(ground_truth, tuples.len(), correct))
}
