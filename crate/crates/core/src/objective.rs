//! Training objectives.
//!
//! * `loss_mt`: per-camera softmax cross-entropy, averaged within each
//!   camera of the batch and then across the cameras present.
//! * `loss_ml`: every image is pushed towards all labels of its identity's
//!   [`MultiLabelSet`], each through the head of that label's camera, with
//!   the per-image loss averaged over the set and the batch.
//! * `loss_total = loss_mt + lambda * loss_ml`.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use crate::data::{stack_rows, IcsDataset, Identity, Sample};
use crate::error::{Error, Result};
use crate::net::{cross_entropy_terms, CeTerm, Gradients, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    samples: Vec<Sample>,
    per_camera_counts: Vec<usize>,
}

impl MiniBatch {
    pub fn new(samples: Vec<Sample>, cameras: usize) -> Result<Self> {
        let mut per_camera_counts = vec![0; cameras];
        for s in &samples {
            if s.camera == 0 || s.camera > cameras {
                return Err(Error::InvalidCamera { camera: s.camera, cameras });
            }
            per_camera_counts[s.camera - 1] += 1;
        }
        Ok(Self { samples, per_camera_counts })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// `B^p` for each camera `p`.
    pub fn per_camera_counts(&self) -> &[usize] {
        &self.per_camera_counts
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cameras_present(&self) -> usize {
        self.per_camera_counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn inputs(&self) -> Array2<f64> {
        let dim = self.samples.first().map_or(0, |s| s.x.len());
        stack_rows(self.samples.iter(), dim)
    }
}

/// Labels attached to every image of `owner` after association: the owner's
/// own label plus at most one associated label from each other camera.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelSet {
    owner: Identity,
    labels: BTreeSet<Identity>,
}

impl MultiLabelSet {
    pub fn singleton(owner: Identity) -> Self {
        Self { owner, labels: BTreeSet::from([owner]) }
    }

    /// Adds an associated label. A second label for a camera already present
    /// is refused.
    pub fn insert(&mut self, label: Identity) -> Result<()> {
        if self.labels.contains(&label) {
            return Ok(());
        }
        if self.labels.iter().any(|l| l.camera == label.camera) {
            return Err(Error::Data(format!(
                "identity ({}, {}) already carries a label from camera {}",
                self.owner.camera, self.owner.label, label.camera
            )));
        }
        self.labels.insert(label);
        Ok(())
    }

    pub fn owner(&self) -> Identity {
        self.owner
    }

    pub fn labels(&self) -> &BTreeSet<Identity> {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Owner membership, one label per camera, `1 <= |Y| <= cameras`.
    pub fn is_valid(&self, cameras: usize) -> bool {
        let per_camera: BTreeSet<usize> = self.labels.iter().map(|l| l.camera).collect();
        self.labels.contains(&self.owner)
            && per_camera.len() == self.labels.len()
            && (1..=cameras).contains(&self.labels.len())
            && self.labels.iter().all(|l| (1..=cameras).contains(&l.camera))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MultiLabelMap(BTreeMap<Identity, MultiLabelSet>);

impl MultiLabelMap {
    /// Every identity labelled only with itself.
    pub fn singletons(ds: &IcsDataset) -> Self {
        Self(ds.identities().map(|i| (i, MultiLabelSet::singleton(i))).collect())
    }

    pub fn get(&self, identity: Identity) -> Option<&MultiLabelSet> {
        self.0.get(&identity)
    }

    pub fn get_mut(&mut self, identity: Identity) -> Option<&mut MultiLabelSet> {
        self.0.get_mut(&identity)
    }

    pub fn insert(&mut self, set: MultiLabelSet) {
        self.0.insert(set.owner(), set);
    }

    pub fn iter(&self) -> impl Iterator<Item = &MultiLabelSet> + '_ {
        self.0.values()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<MultiLabelSet> for MultiLabelMap {
    fn from_iter<T: IntoIterator<Item = MultiLabelSet>>(iter: T) -> Self {
        Self(iter.into_iter().map(|s| (s.owner(), s)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mt: f64,
    pub ml: f64,
    pub total: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("loss weight {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn check_batch(params: &ModelParams, batch: &MiniBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Data("empty mini-batch".into()));
    }
    if batch.per_camera_counts.len() != params.num_heads() {
        return Err(Error::Dimension { expected: params.num_heads(), found: batch.per_camera_counts.len() });
    }
    Ok(())
}

pub(crate) fn mt_terms(batch: &MiniBatch) -> Vec<CeTerm> {
    let present = batch.cameras_present() as f64;
    batch
        .samples
        .iter()
        .enumerate()
        .map(|(row, s)| CeTerm {
            row,
            head: s.camera - 1,
            class: s.label - 1,
            weight: 1.0 / (present * batch.per_camera_counts[s.camera - 1] as f64),
        })
        .collect()
}

pub(crate) fn ml_terms(batch: &MiniBatch, multilabels: &MultiLabelMap) -> Result<Vec<CeTerm>> {
    let b = batch.len() as f64;
    let mut terms = Vec::new();
    for (row, s) in batch.samples.iter().enumerate() {
        let set = multilabels
            .get(Identity::new(s.camera, s.label))
            .ok_or(Error::MissingMultiLabel { camera: s.camera, label: s.label })?;
        let w = 1.0 / (b * set.len() as f64);
        terms.extend(set.labels().iter().map(|l| CeTerm { row, head: l.camera - 1, class: l.label - 1, weight: w }));
    }
    Ok(terms)
}

fn weighted_sum(terms: &[CeTerm], losses: &[f64]) -> f64 {
    terms.iter().zip(losses).map(|(t, l)| t.weight * l).sum()
}

/// Evaluates both objectives on one forward pass; the gradient, when
/// requested, is that of `mt + lambda * ml`.
pub(crate) fn evaluate(
    params: &ModelParams,
    batch: &MiniBatch,
    multilabels: &MultiLabelMap,
    lambda: f64,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    check_lambda(lambda)?;
    check_batch(params, batch)?;
    let mt = mt_terms(batch);
    let ml = ml_terms(batch, multilabels)?;
    let n_mt = mt.len();
    let terms: Vec<CeTerm> =
        mt.iter().copied().chain(ml.iter().map(|t| CeTerm { weight: lambda * t.weight, ..*t })).collect();
    let (losses, grads) = cross_entropy_terms(params, batch.inputs().view(), &terms, with_grad)?;
    let mt_loss = weighted_sum(&mt, &losses[..n_mt]);
    let ml_loss = weighted_sum(&ml, &losses[n_mt..]);
    Ok((LossBreakdown { mt: mt_loss, ml: ml_loss, total: mt_loss + lambda * ml_loss }, grads))
}

pub fn loss_mt(params: &ModelParams, batch: &MiniBatch) -> Result<f64> {
    check_batch(params, batch)?;
    let terms = mt_terms(batch);
    let (losses, _) = cross_entropy_terms(params, batch.inputs().view(), &terms, false)?;
    Ok(weighted_sum(&terms, &losses))
}

pub fn loss_ml(params: &ModelParams, batch: &MiniBatch, multilabels: &MultiLabelMap) -> Result<f64> {
    check_batch(params, batch)?;
    let terms = ml_terms(batch, multilabels)?;
    let (losses, _) = cross_entropy_terms(params, batch.inputs().view(), &terms, false)?;
    Ok(weighted_sum(&terms, &losses))
}

pub fn loss_total(params: &ModelParams, batch: &MiniBatch, multilabels: &MultiLabelMap, lambda: f64) -> Result<f64> {
    Ok(evaluate(params, batch, multilabels, lambda, false)?.0.total)
}
