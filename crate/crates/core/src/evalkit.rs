//! Retrieval evaluation: Euclidean ranking, CMC and mAP, embedding dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{stack_rows, IcsDataset, Sample};
use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::trainer::TrainedModel;

/// Anything that maps raw inputs to retrieval features.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn extract_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl FeatureExtractor for ModelParams {
    fn feature_dim(&self) -> usize {
        ModelParams::feature_dim(self)
    }

    fn extract_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.encode_batch(x)
    }
}

/// Single-model modes use the shared encoder; the per-camera ensemble
/// concatenates the features of all its encoders.
impl FeatureExtractor for TrainedModel {
    fn feature_dim(&self) -> usize {
        TrainedModel::feature_dim(self)
    }

    fn extract_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let parts = self.models.iter().map(|m| m.encode_batch(x)).collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(concatenate(Axis(1), &views).expect("row counts agree"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<u64>,
    pub cameras: Vec<usize>,
    pub global_ids: Vec<Option<u64>>,
    pub features: Array2<f64>,
}

/// A borrowed row of a [`FeatureTable`].
#[derive(Debug, Clone, Copy)]
pub struct Entry<'a> {
    pub id: u64,
    pub camera: usize,
    pub global_id: Option<u64>,
    pub feature: ArrayView1<'a, f64>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn entry(&self, i: usize) -> Entry<'_> {
        Entry { id: self.ids[i], camera: self.cameras[i], global_id: self.global_ids[i], feature: self.features.row(i) }
    }

    /// Copy with every feature scaled to unit length (zero rows stay zero).
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for mut row in out.features.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        out
    }
}

pub fn extract_features(model: &impl FeatureExtractor, samples: &[Sample]) -> Result<FeatureTable> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    if let Some(s) = samples.iter().find(|s| s.x.len() != dim) {
        return Err(Error::Dimension { expected: dim, found: s.x.len() });
    }
    let features = if samples.is_empty() {
        Array2::zeros((0, model.feature_dim()))
    } else {
        model.extract_batch(stack_rows(samples.iter(), dim).view())?
    };
    Ok(FeatureTable {
        ids: samples.iter().map(|s| s.id).collect(),
        cameras: samples.iter().map(|s| s.camera).collect(),
        global_ids: samples.iter().map(|s| s.global_id).collect(),
        features,
    })
}

/// Gallery ids ordered by distance to one query, with relevance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: u64,
    pub gallery_ids: Vec<u64>,
    pub relevant: Vec<bool>,
}

impl RankedList {
    /// 1-based rank of the first relevant entry.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|i| i + 1)
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks the gallery against one query by squared Euclidean distance,
/// ties broken by ascending gallery id. Gallery entries from the query's
/// own camera showing the query's own person are excluded. Returns `None`
/// when no relevant entry remains.
pub fn rank(query: Entry<'_>, gallery: &FeatureTable) -> Result<Option<RankedList>> {
    let qg = query.global_id.ok_or(Error::MissingGlobalId { id: query.id })?;
    if query.feature.len() != gallery.dim() {
        return Err(Error::Dimension { expected: gallery.dim(), found: query.feature.len() });
    }
    let mut scored = Vec::with_capacity(gallery.len());
    for i in 0..gallery.len() {
        let g = gallery.entry(i);
        let gg = g.global_id.ok_or(Error::MissingGlobalId { id: g.id })?;
        if g.camera == query.camera && gg == qg {
            continue;
        }
        scored.push((squared_distance(query.feature, g.feature), g.id, gg == qg));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if !scored.iter().any(|s| s.2) {
        return Ok(None);
    }
    Ok(Some(RankedList {
        query_id: query.id,
        gallery_ids: scored.iter().map(|s| s.1).collect(),
        relevant: scored.iter().map(|s| s.2).collect(),
    }))
}

/// `cmc[k - 1]` is the fraction of lists whose first relevant entry is at
/// rank `k` or better.
pub fn cmc(lists: &[RankedList], max_rank: usize) -> Vec<f64> {
    let mut hits = vec![0usize; max_rank];
    for l in lists {
        if let Some(r) = l.first_hit() {
            if r <= max_rank {
                hits[r - 1] += 1;
            }
        }
    }
    let n = lists.len().max(1) as f64;
    let mut acc = 0;
    hits.into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect()
}

/// Average precision: mean of `i / r_i` over the relevant positions
/// `r_1 < r_2 < ...` (1-based).
pub fn average_precision(list: &RankedList) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, &rel) in list.relevant.iter().enumerate() {
        if rel {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

pub fn mean_ap(lists: &[RankedList]) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    lists.iter().map(average_precision).sum::<f64>() / lists.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub queries: usize,
    /// Queries without any admissible relevant gallery entry.
    pub skipped: usize,
}

/// The headline numbers: rank-1, rank-10, rank-20 and mAP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "R20")]
    pub r20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

impl EvalResult {
    pub fn rank_k(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics { r1: self.rank_k(1), r10: self.rank_k(10), r20: self.rank_k(20), map: self.map }
    }
}

pub fn evaluate_tables(query: &FeatureTable, gallery: &FeatureTable, max_rank: usize) -> Result<EvalResult> {
    let lists: Vec<Option<RankedList>> =
        (0..query.len()).into_par_iter().map(|i| rank(query.entry(i), gallery)).collect::<Result<_>>()?;
    let skipped = lists.iter().filter(|l| l.is_none()).count();
    let lists: Vec<RankedList> = lists.into_iter().flatten().collect();
    Ok(EvalResult { cmc: cmc(&lists, max_rank), map: mean_ap(&lists), queries: lists.len(), skipped })
}

/// Extracts query and gallery features of the dataset's test split and
/// scores retrieval.
pub fn evaluate(
    model: &impl FeatureExtractor,
    ds: &IcsDataset,
    max_rank: usize,
    normalize: bool,
) -> Result<EvalResult> {
    let test = ds.test();
    let mut q = extract_features(model, &test.query)?;
    let mut g = extract_features(model, &test.gallery)?;
    if normalize {
        q = q.normalized();
        g = g.normalized();
    }
    evaluate_tables(&q, &g, max_rank)
}

/// CSV with columns `id,camera,global_id,f0..f{d-1}`; an absent global id
/// is an empty field.
pub fn embeddings_csv(table: &FeatureTable) -> String {
    let mut out = String::from("id,camera,global_id");
    for j in 0..table.dim() {
        write!(out, ",f{j}").expect("string write");
    }
    out.push('\n');
    for i in 0..table.len() {
        let e = table.entry(i);
        write!(out, "{},{},", e.id, e.camera).expect("string write");
        if let Some(g) = e.global_id {
            write!(out, "{g}").expect("string write");
        }
        for v in e.feature {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn dump_embeddings(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, embeddings_csv(table))?;
    Ok(())
}

pub fn parse_embeddings(text: &str) -> Result<FeatureTable> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, message: "empty file".into() })?;
    let cols = header.split(',').count();
    if cols < 3 || !header.starts_with("id,camera,global_id") {
        return Err(Error::Parse { line: 1, message: "unexpected header".into() });
    }
    let dim = cols - 3;
    let mut table =
        FeatureTable { ids: vec![], cameras: vec![], global_ids: vec![], features: Array2::zeros((0, dim)) };
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let err = |m: &str| Error::Parse { line: line_no, message: m.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols {
            return Err(err("column count"));
        }
        table.ids.push(f[0].parse().map_err(|_| err("id"))?);
        table.cameras.push(f[1].parse().map_err(|_| err("camera"))?);
        table.global_ids.push(if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| err("global_id"))?) });
        for v in &f[3..] {
            data.push(v.parse::<f64>().map_err(|_| err("feature"))?);
        }
    }
    table.features = Array2::from_shape_vec((table.ids.len(), dim), data).expect("row lengths checked");
    Ok(table)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<FeatureTable> {
    parse_embeddings(&fs::read_to_string(path)?)
}
