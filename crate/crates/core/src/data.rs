//! Intra-camera labelled datasets.
//!
//! Each camera owns an independent label space `1..=N_p`. Equal integer
//! labels in two different cameras say nothing about identity. The optional
//! `global_id` on a [`Sample`] is the hidden ground truth: generators and
//! evaluation read it, training never does.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// One observation of a person in one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: u64,
    /// 1-based camera index.
    pub camera: usize,
    /// 1-based intra-camera identity label.
    pub label: usize,
    pub global_id: Option<u64>,
    pub x: Vec<f64>,
}

/// An identity class within one camera's label space (both 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub camera: usize,
    pub label: usize,
}

impl Identity {
    pub fn new(camera: usize, label: usize) -> Self {
        Self { camera, label }
    }
}

/// Held-out query and gallery samples. Their labels index a separate
/// per-camera test label space.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub label_space_sizes: Vec<usize>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl TestSplit {
    pub fn empty(cameras: usize) -> Self {
        Self { label_space_sizes: vec![0; cameras], query: Vec::new(), gallery: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty() && self.gallery.is_empty()
    }
}

/// A validated intra-camera supervised training set plus its test split.
#[derive(Debug, Clone, PartialEq)]
pub struct IcsDataset {
    label_space_sizes: Vec<usize>,
    per_camera: Vec<Vec<Sample>>,
    /// `groups[p - 1][k - 1]` lists indices into `per_camera[p - 1]`.
    groups: Vec<Vec<Vec<usize>>>,
    test: TestSplit,
}

impl IcsDataset {
    /// Builds a dataset from flat training samples, grouping them by camera
    /// while preserving their relative order.
    pub fn new(label_space_sizes: Vec<usize>, train: Vec<Sample>, test: TestSplit) -> Result<Self> {
        let cameras = label_space_sizes.len();
        if cameras == 0 {
            return Err(Error::Data("dataset needs at least one camera".into()));
        }
        if test.label_space_sizes.len() != cameras {
            return Err(Error::Data(format!(
                "test split declares {} cameras, training split {}",
                test.label_space_sizes.len(),
                cameras
            )));
        }
        for (p, &n) in label_space_sizes.iter().enumerate() {
            if n < 2 {
                return Err(Error::Data(format!("camera {} has {} identities; at least 2 required", p + 1, n)));
            }
        }

        let mut dim = None;
        let mut ids = HashSet::new();
        let mut check = |s: &Sample, sizes: &[usize]| -> Result<()> {
            if s.camera == 0 || s.camera > cameras {
                return Err(Error::InvalidCamera { camera: s.camera, cameras });
            }
            let n = sizes[s.camera - 1];
            if s.label == 0 || s.label > n {
                return Err(Error::Data(format!(
                    "sample {} has label {} outside 1..={} of camera {}",
                    s.id, s.label, n, s.camera
                )));
            }
            if let Some(i) = s.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sample {} has non-finite component {}", s.id, i)));
            }
            match dim {
                None => dim = Some(s.x.len()),
                Some(d) if d != s.x.len() => return Err(Error::Dimension { expected: d, found: s.x.len() }),
                _ => {}
            }
            if !ids.insert(s.id) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
            Ok(())
        };
        for s in &train {
            check(s, &label_space_sizes)?;
        }
        for s in test.query.iter().chain(&test.gallery) {
            check(s, &test.label_space_sizes)?;
        }
        if dim == Some(0) {
            return Err(Error::Data("samples must have at least one feature".into()));
        }

        let mut per_camera: Vec<Vec<Sample>> = vec![Vec::new(); cameras];
        for s in train {
            per_camera[s.camera - 1].push(s);
        }
        let mut groups: Vec<Vec<Vec<usize>>> = label_space_sizes.iter().map(|&n| vec![Vec::new(); n]).collect();
        for (p, samples) in per_camera.iter().enumerate() {
            for (i, s) in samples.iter().enumerate() {
                groups[p][s.label - 1].push(i);
            }
        }
        for (p, g) in groups.iter().enumerate() {
            if let Some(k) = g.iter().position(Vec::is_empty) {
                return Err(Error::Data(format!("camera {} identity {} has no training samples", p + 1, k + 1)));
            }
        }

        Ok(Self { label_space_sizes, per_camera, groups, test })
    }

    pub fn num_cameras(&self) -> usize {
        self.label_space_sizes.len()
    }

    pub fn label_space_sizes(&self) -> &[usize] {
        &self.label_space_sizes
    }

    pub fn label_space_size(&self, camera: usize) -> Result<usize> {
        self.check_camera(camera)?;
        Ok(self.label_space_sizes[camera - 1])
    }

    pub fn check_camera(&self, camera: usize) -> Result<()> {
        if camera == 0 || camera > self.num_cameras() {
            return Err(Error::InvalidCamera { camera, cameras: self.num_cameras() });
        }
        Ok(())
    }

    /// Input feature dimension, or 0 for a dataset without samples.
    pub fn input_dim(&self) -> usize {
        self.per_camera
            .iter()
            .flatten()
            .chain(&self.test.query)
            .chain(&self.test.gallery)
            .next()
            .map_or(0, |s| s.x.len())
    }

    pub fn camera_samples(&self, camera: usize) -> &[Sample] {
        &self.per_camera[camera - 1]
    }

    /// Indices into [`Self::camera_samples`] of every image of an identity.
    pub fn identity_indices(&self, identity: Identity) -> &[usize] {
        &self.groups[identity.camera - 1][identity.label - 1]
    }

    pub fn identity_samples(&self, identity: Identity) -> impl Iterator<Item = &Sample> + '_ {
        let samples = self.camera_samples(identity.camera);
        self.identity_indices(identity).iter().map(move |&i| &samples[i])
    }

    pub fn identities(&self) -> impl Iterator<Item = Identity> + '_ {
        self.label_space_sizes.iter().enumerate().flat_map(|(p, &n)| (1..=n).map(move |k| Identity::new(p + 1, k)))
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> + '_ {
        self.per_camera.iter().flatten()
    }

    pub fn train_len(&self) -> usize {
        self.per_camera.iter().map(Vec::len).sum()
    }

    pub fn test(&self) -> &TestSplit {
        &self.test
    }

    /// Hidden ground-truth person behind an identity class. Only evaluation
    /// code may call this.
    pub fn global_id_of(&self, identity: Identity) -> Result<u64> {
        let s = self.identity_samples(identity).next().expect("dataset invariant: every identity has a sample");
        s.global_id.ok_or(Error::MissingGlobalId { id: s.id })
    }

    /// The training data of one camera as a standalone single-camera dataset
    /// (camera index rewritten to 1, empty test split).
    pub fn single_camera(&self, camera: usize) -> Result<IcsDataset> {
        self.check_camera(camera)?;
        let samples = self.per_camera[camera - 1]
            .iter()
            .cloned()
            .map(|mut s| {
                s.camera = 1;
                s
            })
            .collect();
        IcsDataset::new(vec![self.label_space_sizes[camera - 1]], samples, TestSplit::empty(1))
    }

    /// Training samples of every camera stacked into one matrix, in
    /// camera-major order.
    pub fn camera_matrix(&self, camera: usize) -> Array2<f64> {
        stack_rows(self.camera_samples(camera).iter(), self.input_dim())
    }
}

pub(crate) fn stack_rows<'a>(samples: impl Iterator<Item = &'a Sample>, dim: usize) -> Array2<f64> {
    let mut data = Vec::new();
    let mut rows = 0;
    for s in samples {
        data.extend_from_slice(&s.x);
        rows += 1;
    }
    Array2::from_shape_vec((rows, dim), data).expect("rows share the input dimension")
}

/// Samples whose identity is known only through `global_id`; the input to
/// [`ics_transform`]. Labels are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct FullyLabelled {
    pub cameras: usize,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

/// Replaces every label with an independently permuted per-camera index.
///
/// Within camera `p`, the distinct global identities (ascending) are mapped
/// onto a seeded shuffle of `1..=N_p`. Each camera draws from its own stream,
/// so the permutations are mutually independent. The test split is relabelled
/// the same way over its own label space.
pub fn ics_transform(full: &FullyLabelled, seed: u64) -> Result<IcsDataset> {
    let m = full.cameras;
    if m == 0 {
        return Err(Error::Data("dataset needs at least one camera".into()));
    }
    for s in full.train.iter().chain(&full.query).chain(&full.gallery) {
        if s.global_id.is_none() {
            return Err(Error::MissingGlobalId { id: s.id });
        }
        if s.camera == 0 || s.camera > m {
            return Err(Error::InvalidCamera { camera: s.camera, cameras: m });
        }
    }

    let relabel = |samples: &[&Sample], purpose: Purpose| -> (Vec<usize>, Vec<BTreeMap<u64, usize>>) {
        let mut sizes = Vec::with_capacity(m);
        let mut maps = Vec::with_capacity(m);
        for p in 1..=m {
            let gids: BTreeSet<u64> = samples.iter().filter(|s| s.camera == p).filter_map(|s| s.global_id).collect();
            let mut perm: Vec<usize> = (1..=gids.len()).collect();
            perm.shuffle(&mut stream(seed, purpose, p as u64));
            sizes.push(gids.len());
            maps.push(gids.into_iter().zip(perm).collect());
        }
        (sizes, maps)
    };
    let apply = |samples: &[Sample], maps: &[BTreeMap<u64, usize>]| -> Vec<Sample> {
        samples
            .iter()
            .map(|s| Sample { label: maps[s.camera - 1][&s.global_id.expect("checked above")], ..s.clone() })
            .collect()
    };

    let train_refs: Vec<&Sample> = full.train.iter().collect();
    let (sizes, maps) = relabel(&train_refs, Purpose::TrainLabels);
    let test_refs: Vec<&Sample> = full.query.iter().chain(&full.gallery).collect();
    let (test_sizes, test_maps) = relabel(&test_refs, Purpose::TestLabels);

    let test = TestSplit {
        label_space_sizes: test_sizes,
        query: apply(&full.query, &test_maps),
        gallery: apply(&full.gallery, &test_maps),
    };
    IcsDataset::new(sizes, apply(&full.train, &maps), test)
}

/// Parameters of the synthetic multi-camera generator.
///
/// Person `g` has a latent vector `z_g ~ N(0, I)`. Camera `p` observes
/// `x = A_p z_g + b_p + noise`, where `A_p = P + s R_p` shares a base
/// projection `P` across cameras and `s` is `camera_transform_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cameras: usize,
    /// Training identities, global ids `1..=identities`.
    pub identities: usize,
    /// Probability that a given identity is visible in a given camera.
    pub reappear_fraction: f64,
    pub samples_per_identity: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub camera_transform_scale: f64,
    pub noise_sigma: f64,
    /// Held-out identities for the query/gallery split (global ids after
    /// the training ones).
    pub test_identities: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cameras: 4,
            identities: 50,
            reappear_fraction: 0.6,
            samples_per_identity: 8,
            latent_dim: 16,
            input_dim: 32,
            camera_transform_scale: 0.5,
            noise_sigma: 0.15,
            test_identities: 300,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.cameras < 2 {
            return fail("synthetic data needs at least 2 cameras");
        }
        if self.identities < 2 {
            return fail("synthetic data needs at least 2 identities");
        }
        if !(0.0..=1.0).contains(&self.reappear_fraction) {
            return fail("reappear_fraction must lie in [0, 1]");
        }
        if self.samples_per_identity == 0 {
            return fail("samples_per_identity must be at least 1");
        }
        if self.latent_dim == 0 || self.input_dim == 0 {
            return fail("dimensions must be at least 1");
        }
        if !(self.camera_transform_scale >= 0.0 && self.camera_transform_scale.is_finite()) {
            return fail("camera_transform_scale must be finite and nonnegative");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and nonnegative");
        }
        Ok(())
    }
}

struct CameraTransform {
    a: Array2<f64>,
    b: Array1<f64>,
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn latent(seed: u64, global_id: u64, dim: usize) -> Array1<f64> {
    let mut rng = stream(seed, Purpose::Latent, global_id);
    Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

/// Identities visible in `camera`: each of `ids` independently with
/// probability `fraction`.
fn visible_ids(seed: u64, purpose: Purpose, camera: usize, ids: impl Iterator<Item = u64>, fraction: f64) -> Vec<u64> {
    let mut rng = stream(seed, purpose, camera as u64);
    ids.filter(|_| rng.random::<f64>() < fraction).collect()
}

/// Generates a synthetic multi-camera dataset with independently permuted
/// per-camera labels. Pure function of the config, including its seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<IcsDataset> {
    cfg.validate()?;
    let (m, dl, din) = (cfg.cameras, cfg.latent_dim, cfg.input_dim);
    let inv_sqrt = 1.0 / (dl as f64).sqrt();

    let base = gaussian_matrix(&mut stream(cfg.seed, Purpose::BaseProjection, 0), din, dl, inv_sqrt);
    let transforms: Vec<CameraTransform> = (1..=m)
        .map(|p| {
            let mut rng = stream(cfg.seed, Purpose::CameraTransform, p as u64);
            let r = gaussian_matrix(&mut rng, din, dl, inv_sqrt);
            let b =
                Array1::from_shape_simple_fn(din, || cfg.camera_transform_scale * rng.sample::<f64, _>(StandardNormal));
            CameraTransform { a: &base + &(r * cfg.camera_transform_scale), b }
        })
        .collect();

    let observe = |t: &CameraTransform, z: &Array1<f64>, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let clean = t.a.dot(z) + &t.b;
        clean.iter().map(|v| v + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)).collect()
    };

    let g = cfg.identities as u64;
    let mut next_id = 1u64;
    let mut train = Vec::new();
    for p in 1..=m {
        let visible = visible_ids(cfg.seed, Purpose::Visibility, p, 1..=g, cfg.reappear_fraction);
        if visible.len() < 2 {
            return Err(Error::Config(format!(
                "camera {} observes {} identities; at least 2 required (raise reappear_fraction or identities)",
                p,
                visible.len()
            )));
        }
        let mut noise = stream(cfg.seed, Purpose::TrainNoise, p as u64);
        for gid in visible {
            let z = latent(cfg.seed, gid, dl);
            for _ in 0..cfg.samples_per_identity {
                train.push(Sample {
                    id: next_id,
                    camera: p,
                    label: 0,
                    global_id: Some(gid),
                    x: observe(&transforms[p - 1], &z, &mut noise),
                });
                next_id += 1;
            }
        }
    }

    let test_ids = g + 1..=g + cfg.test_identities as u64;
    let test_visible: Vec<Vec<u64>> = (1..=m)
        .map(|p| visible_ids(cfg.seed, Purpose::TestVisibility, p, test_ids.clone(), cfg.reappear_fraction))
        .collect();
    let mut camera_count: BTreeMap<u64, usize> = BTreeMap::new();
    for gid in test_visible.iter().flatten() {
        *camera_count.entry(*gid).or_default() += 1;
    }
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (p, visible) in (1..=m).zip(&test_visible) {
        let mut noise = stream(cfg.seed, Purpose::TestNoise, p as u64);
        for &gid in visible {
            let z = latent(cfg.seed, gid, dl);
            let queryable = camera_count[&gid] >= 2;
            for s in 0..cfg.samples_per_identity {
                let sample = Sample {
                    id: next_id,
                    camera: p,
                    label: 0,
                    global_id: Some(gid),
                    x: observe(&transforms[p - 1], &z, &mut noise),
                };
                next_id += 1;
                if queryable && s == 0 {
                    query.push(sample);
                } else {
                    gallery.push(sample);
                }
            }
        }
    }

    ics_transform(&FullyLabelled { cameras: m, train, query, gallery }, cfg.seed)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "M")]
    cameras: usize,
    label_space_sizes: Vec<usize>,
    split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Query,
    Gallery,
}

fn write_section(
    out: &mut impl Write,
    cameras: usize,
    sizes: &[usize],
    split: Split,
    samples: &[Sample],
) -> Result<()> {
    let header = Header { cameras, label_space_sizes: sizes.to_vec(), split };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes the JSON-lines dataset layout: a header line before each of the
/// `train`, `query` and `gallery` sections, then one sample per line.
pub fn write_dataset(ds: &IcsDataset, out: &mut impl Write) -> Result<()> {
    let m = ds.num_cameras();
    let train: Vec<Sample> = ds.train_samples().cloned().collect();
    write_section(out, m, ds.label_space_sizes(), Split::Train, &train)?;
    let t = ds.test();
    write_section(out, m, &t.label_space_sizes, Split::Query, &t.query)?;
    write_section(out, m, &t.label_space_sizes, Split::Gallery, &t.gallery)?;
    Ok(())
}

pub fn save_dataset(ds: &IcsDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut out)?;
    out.flush()?;
    Ok(())
}

struct Section {
    header: Header,
    samples: Vec<Sample>,
}

fn read_sections(input: impl BufRead) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse { line: line_no, message: e.to_string() };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
        if value.get("split").is_some() {
            let header: Header = serde_json::from_value(value).map_err(parse_err)?;
            if let Some(first) = sections.first() {
                if first.header.cameras != header.cameras {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!(
                            "header declares M={}, earlier header M={}",
                            header.cameras, first.header.cameras
                        ),
                    });
                }
            }
            if sections.iter().any(|s| s.header.split == header.split) {
                return Err(Error::Parse { line: line_no, message: "repeated split header".into() });
            }
            sections.push(Section { header, samples: Vec::new() });
        } else {
            let sample: Sample = serde_json::from_value(value).map_err(parse_err)?;
            let section = sections
                .last_mut()
                .ok_or(Error::Parse { line: line_no, message: "sample before any header line".into() })?;
            if sample.camera == 0 || sample.camera > section.header.cameras {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("camera {} outside 1..={}", sample.camera, section.header.cameras),
                });
            }
            section.samples.push(sample);
        }
    }
    match sections.first() {
        Some(s) if s.header.split == Split::Train => Ok(sections),
        _ => Err(Error::Parse { line: 1, message: "file must start with a train header".into() }),
    }
}

fn take_split(sections: &mut Vec<Section>, split: Split) -> Option<Section> {
    let i = sections.iter().position(|s| s.header.split == split)?;
    Some(sections.remove(i))
}

pub fn read_dataset(input: impl BufRead) -> Result<IcsDataset> {
    let mut sections = read_sections(input)?;
    let train = take_split(&mut sections, Split::Train).expect("checked by read_sections");
    let m = train.header.cameras;
    if train.header.label_space_sizes.len() != m {
        return Err(Error::Data(format!(
            "train header lists {} label space sizes for M={}",
            train.header.label_space_sizes.len(),
            m
        )));
    }
    let query = take_split(&mut sections, Split::Query);
    let gallery = take_split(&mut sections, Split::Gallery);
    let test_sizes =
        query.as_ref().or(gallery.as_ref()).map_or_else(|| vec![0; m], |s| s.header.label_space_sizes.clone());
    for s in query.iter().chain(gallery.iter()) {
        if s.header.label_space_sizes != test_sizes {
            return Err(Error::Data("query and gallery headers disagree on label space sizes".into()));
        }
    }
    let test = TestSplit {
        label_space_sizes: test_sizes,
        query: query.map(|s| s.samples).unwrap_or_default(),
        gallery: gallery.map(|s| s.samples).unwrap_or_default(),
    };
    IcsDataset::new(train.header.label_space_sizes, train.samples, test)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<IcsDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Loads a file in the dataset layout without checking labels, for input to
/// [`ics_transform`]. Every sample must carry a `global_id`.
pub fn load_fully_labelled(path: impl AsRef<Path>) -> Result<FullyLabelled> {
    let mut sections = read_sections(BufReader::new(File::open(path)?))?;
    let train = take_split(&mut sections, Split::Train).expect("checked by read_sections");
    let cameras = train.header.cameras;
    let query = take_split(&mut sections, Split::Query).map(|s| s.samples).unwrap_or_default();
    let gallery = take_split(&mut sections, Split::Gallery).map(|s| s.samples).unwrap_or_default();
    Ok(FullyLabelled { cameras, train: train.samples, query, gallery })
}

/// Leading-term pairwise comparison counts for annotating `N` people in each
/// of `M` cameras.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Intra-camera labelling, `M N^2`.
    pub intra_total: u128,
    /// Cross-camera labelling when everyone reappears everywhere, `N^2 M`.
    pub inter_low: u128,
    /// Cross-camera labelling when nobody reappears, `M^2 N^2`.
    pub inter_high: u128,
}

pub fn annotation_cost(identities: u64, cameras: u64) -> CostEstimate {
    let (n, m) = (u128::from(identities), u128::from(cameras));
    CostEstimate { intra_total: m * n * n, inter_low: n * n * m, inter_high: m * m * n * n }
}
