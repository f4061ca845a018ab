//! Round / epoch / batch training loop and the baseline variants.
//!
//! Each round first computes its threshold, associates identities across
//! cameras with the parameters frozen at the start of the round, and then
//! trains for a number of epochs on the combined objective with the
//! resulting multi-label sets.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assoc::{
    associate_all, associate_cycles, association_metrics, camera_cycles, curriculum_threshold, cycle_metrics,
    AssociationReport, CurriculumSchedule,
};
use crate::data::{IcsDataset, Identity};
use crate::error::{Error, Result};
use crate::net::{cross_entropy_terms, sgd_step, CeTerm, EncoderConfig, ModelParams, OptimState, DEFAULT_MOMENTUM};
use crate::objective::{self, LossBreakdown, MiniBatch, MultiLabelMap};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Multi-task training plus curriculum cyclic association.
    Mate,
    /// Per-camera multi-task training only.
    Pcmt,
    /// One classifier over the merged label spaces.
    Mcst,
    /// One independent model per camera, features concatenated.
    Epcs,
    /// Association with a constant threshold (no curriculum).
    MateNoCt,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Mcst, Mode::Epcs, Mode::Pcmt, Mode::MateNoCt, Mode::Mate];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mate => "mate",
            Mode::Pcmt => "pcmt",
            Mode::Mcst => "mcst",
            Mode::Epcs => "epcs",
            Mode::MateNoCt => "mate-no-ct",
        }
    }

    /// Row label used in result tables.
    pub fn table_name(self) -> &'static str {
        match self {
            Mode::Mate => "MATE",
            Mode::Pcmt => "PCMT",
            Mode::Mcst => "MCST",
            Mode::Epcs => "EPCS",
            Mode::MateNoCt => "PCMT+CCML",
        }
    }

    pub fn associates(self) -> bool {
        matches!(self, Mode::Mate | Mode::MateNoCt)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s) || m.table_name().eq_ignore_ascii_case(s))
            .or_else(|| s.eq_ignore_ascii_case("mate_no_ct").then_some(Mode::MateNoCt))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small constants so a full benchmark finishes in seconds.
    Desk,
    /// Constants of the original large-scale setup.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub identities_per_camera: usize,
    pub images_per_identity: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { identities_per_camera: 2, images_per_identity: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Classical momentum with coefficient [`DEFAULT_MOMENTUM`].
    pub momentum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub final_round_epochs: usize,
    pub lambda: f64,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderConfig,
    /// Cameras per association cycle; 2 is pairwise association.
    pub cycle_length: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            mode: Mode::Mate,
            rounds: 6,
            epochs_per_round: 5,
            final_round_epochs: 50,
            lambda: 0.5,
            tau_lower: 0.5,
            tau_upper: 0.95,
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig { lr_backbone: 0.005, lr_heads: 0.05, momentum: true },
            encoder: EncoderConfig::default(),
            cycle_length: 2,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            rounds: 10,
            epochs_per_round: 20,
            final_round_epochs: 50,
            encoder: EncoderConfig { hidden: vec![512], feature_dim: 512 },
            ..Self::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule { tau_lower: self.tau_lower, tau_upper: self.tau_upper, rounds: self.rounds }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("rounds", self.rounds),
            ("epochs_per_round", self.epochs_per_round),
            ("final_round_epochs", self.final_round_epochs),
            ("identities_per_camera", self.sampler.identities_per_camera),
            ("images_per_identity", self.sampler.images_per_identity),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.cycle_length < 2 {
            return Err(Error::Config("cycle_length must be at least 2".into()));
        }
        self.schedule().validate()?;
        OptimState::new(self.optimizer.lr_backbone, self.optimizer.lr_heads, None)?;
        Ok(())
    }

    /// Weight of the multi-label term actually used by this mode.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.associates() {
            self.lambda
        } else {
            0.0
        }
    }

    /// Threshold used in round `r`: annealed for MATE, fixed at the lower
    /// bound for the no-curriculum ablation.
    pub fn threshold(&self, round: usize) -> Result<f64> {
        match self.mode {
            Mode::MateNoCt => Ok(self.tau_lower),
            _ => curriculum_threshold(&self.schedule(), round),
        }
    }

    fn epochs_in_round(&self, round: usize) -> usize {
        if round + 1 == self.rounds {
            self.final_round_epochs
        } else {
            self.epochs_per_round
        }
    }
}

/// A model produced by [`train`]: one parameter set, or one per camera for
/// the independent-per-camera baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub mode: Mode,
    pub models: Vec<ModelParams>,
}

pub const CHECKPOINT_FORMAT: &str = "mate-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    generator: String,
    #[serde(flatten)]
    model: TrainedModel,
}

impl TrainedModel {
    pub fn feature_dim(&self) -> usize {
        self.models.iter().map(ModelParams::feature_dim).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            generator: rng::GENERATOR.into(),
            model: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version)));
        }
        if ckpt.model.models.is_empty() {
            return Err(Error::Config("checkpoint holds no parameters".into()));
        }
        Ok(ckpt.model)
    }
}

/// Initial architecture for any mode: per-camera heads (MATE, PCMT, the
/// ablation), one merged head of `sum N_p` classes (MCST), or one
/// single-head model per camera (EPCS).
pub fn build_model(ds: &IcsDataset, mode: Mode, encoder: &EncoderConfig, seed: u64) -> Result<TrainedModel> {
    let d_in = ds.input_dim();
    let sizes = ds.label_space_sizes();
    let init = |index: u64, heads: &[usize]| {
        ModelParams::init(d_in, encoder, heads, &mut rng::stream(seed, Purpose::Init, index))
    };
    let models = match mode {
        Mode::Mcst => vec![init(0, &[sizes.iter().sum()])?],
        Mode::Epcs => (1..=sizes.len()).map(|p| init(p as u64, &[sizes[p - 1]])).collect::<Result<_>>()?,
        Mode::Mate | Mode::Pcmt | Mode::MateNoCt => vec![init(0, sizes)?],
    };
    Ok(TrainedModel { mode, models })
}

/// [`build_model`] restricted to the three baselines.
pub fn build_baseline(ds: &IcsDataset, mode: Mode, encoder: &EncoderConfig, seed: u64) -> Result<TrainedModel> {
    match mode {
        Mode::Mcst | Mode::Epcs | Mode::Pcmt => build_model(ds, mode, encoder, seed),
        other => Err(Error::Config(format!("{other} is not a baseline"))),
    }
}

fn draw_indices(rng: &mut impl Rng, available: usize, wanted: usize) -> Vec<usize> {
    if available >= wanted {
        index::sample(rng, available, wanted).into_vec()
    } else {
        let mut out: Vec<usize> = (0..available).collect();
        out.extend((available..wanted).map(|_| rng.random_range(0..available)));
        out
    }
}

/// Draws `identities_per_camera` identities from every camera and
/// `images_per_identity` images from each. Draws are without replacement
/// when enough are available; otherwise everything is taken once and the
/// shortfall is drawn with replacement.
pub fn balanced_minibatch(ds: &IcsDataset, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<MiniBatch> {
    let m = ds.num_cameras();
    let mut samples = Vec::with_capacity(m * cfg.identities_per_camera * cfg.images_per_identity);
    for p in 1..=m {
        let n_p = ds.label_space_size(p)?;
        for k in draw_indices(rng, n_p, cfg.identities_per_camera) {
            let images = ds.identity_indices(Identity::new(p, k + 1));
            for i in draw_indices(rng, images.len(), cfg.images_per_identity) {
                samples.push(ds.camera_samples(p)[images[i]].clone());
            }
        }
    }
    MiniBatch::new(samples, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub model: usize,
    pub round: usize,
    pub epoch: usize,
    /// Position in the event sequence shared with [`RoundRecord::seq`].
    pub seq: usize,
    pub batches: usize,
    pub loss_mt: f64,
    pub loss_ml: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub model: usize,
    pub round: usize,
    pub seq: usize,
    pub tau: f64,
    pub predicted_pairs: usize,
    /// Absent when the training data carries no hidden identities.
    pub report: Option<AssociationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: Mode,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Excluded from [`TrainLog::to_csv`] so logs of identical runs match
    /// byte for byte.
    pub wall_clock_secs: f64,
}

pub const LOG_COLUMNS: &str =
    "seq,kind,model,round,epoch,tau,predicted_pairs,correct_pairs,ground_truth_pairs,precision,recall,loss_mt,loss_ml,loss_total";

pub const ASSOC_STATS_COLUMNS: &str = "round,tau,predicted_pairs,correct_pairs,ground_truth_pairs,precision,recall";

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl TrainLog {
    /// Event log, one row per association round or epoch in execution order.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(usize, String)> = Vec::new();
        for r in &self.rounds {
            let rep = r.report.as_ref();
            rows.push((
                r.seq,
                format!(
                    "{},assoc,{},{},,{},{},{},{},{},{},,,",
                    r.seq,
                    r.model,
                    r.round,
                    r.tau,
                    r.predicted_pairs,
                    opt(rep.map(|x| x.correct_pairs)),
                    opt(rep.map(|x| x.ground_truth_pairs)),
                    opt(rep.map(|x| x.precision)),
                    opt(rep.map(|x| x.recall)),
                ),
            ));
        }
        for e in &self.epochs {
            rows.push((
                e.seq,
                format!(
                    "{},epoch,{},{},{},,,,,,,{},{},{}",
                    e.seq, e.model, e.round, e.epoch, e.loss_mt, e.loss_ml, e.loss_total
                ),
            ));
        }
        rows.sort_by_key(|(seq, _)| *seq);
        let mut out = String::from(LOG_COLUMNS);
        out.push('\n');
        for (_, row) in rows {
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Per-round association statistics in the layout of
    /// [`ASSOC_STATS_COLUMNS`].
    pub fn association_stats_csv(&self) -> String {
        association_stats_csv(&self.rounds)
    }

    pub fn final_round(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }
}

pub fn association_stats_csv(rounds: &[RoundRecord]) -> String {
    let mut out = String::from(ASSOC_STATS_COLUMNS);
    out.push('\n');
    for r in rounds {
        let rep = r.report.as_ref();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.tau,
            r.predicted_pairs,
            opt(rep.map(|x| x.correct_pairs)),
            opt(rep.map(|x| x.ground_truth_pairs)),
            opt(rep.map(|x| x.precision)),
            opt(rep.map(|x| x.recall)),
        ));
    }
    out
}

/// Recovers the association rows of a CSV written by [`TrainLog::to_csv`].
pub fn rounds_from_log_csv(text: &str) -> Result<Vec<RoundRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LOG_COLUMNS => {}
        _ => return Err(Error::Parse { line: 1, message: "not a training log (header mismatch)".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let err = |what: &str| Error::Parse { line: i + 1, message: format!("bad {what}") };
        if cols.len() != 14 {
            return Err(err("column count"));
        }
        if cols[1] != "assoc" {
            continue;
        }
        let num = |c: &str, what: &str| c.parse::<usize>().map_err(|_| err(what));
        let real = |c: &str, what: &str| c.parse::<f64>().map_err(|_| err(what));
        let report = if cols[7].is_empty() {
            None
        } else {
            Some(AssociationReport {
                ground_truth_pairs: num(cols[8], "ground_truth_pairs")?,
                predicted_pairs: num(cols[6], "predicted_pairs")?,
                correct_pairs: num(cols[7], "correct_pairs")?,
                precision: real(cols[9], "precision")?,
                recall: real(cols[10], "recall")?,
            })
        };
        out.push(RoundRecord {
            seq: num(cols[0], "seq")?,
            model: num(cols[2], "model")?,
            round: num(cols[3], "round")?,
            tau: real(cols[5], "tau")?,
            predicted_pairs: num(cols[6], "predicted_pairs")?,
            report,
        });
    }
    Ok(out)
}

/// How a batch turns into cross-entropy terms.
enum Objective {
    /// Multi-task over per-camera heads plus weighted multi-label term.
    MultiTask { lambda: f64 },
    /// Single head over all label spaces stacked; `offsets[p - 1]` is the
    /// first class of camera `p`.
    Merged { offsets: Vec<usize> },
}

impl Objective {
    fn step(
        &self,
        params: &ModelParams,
        batch: &MiniBatch,
        multilabels: &MultiLabelMap,
    ) -> Result<(LossBreakdown, crate::net::Gradients)> {
        match self {
            Objective::MultiTask { lambda } => {
                let (b, g) = objective::evaluate(params, batch, multilabels, *lambda, true)?;
                Ok((b, g.expect("requested")))
            }
            Objective::Merged { offsets } => {
                let w = 1.0 / batch.len() as f64;
                let terms: Vec<CeTerm> = batch
                    .samples()
                    .iter()
                    .enumerate()
                    .map(|(row, s)| CeTerm { row, head: 0, class: offsets[s.camera - 1] + s.label - 1, weight: w })
                    .collect();
                let (losses, g) = cross_entropy_terms(params, batch.inputs().view(), &terms, true)?;
                let mt = losses.iter().map(|l| w * l).sum();
                Ok((LossBreakdown { mt, ml: 0.0, total: mt }, g.expect("requested")))
            }
        }
    }
}

struct Loop<'a> {
    ds: &'a IcsDataset,
    cfg: &'a TrainConfig,
    model: usize,
    objective: Objective,
    associate: bool,
}

impl Loop<'_> {
    fn run(&self, params: &mut ModelParams, log: &mut TrainLog, seq: &mut usize) -> Result<()> {
        let cfg = self.cfg;
        let mut opt = OptimState::new(
            cfg.optimizer.lr_backbone,
            cfg.optimizer.lr_heads,
            cfg.optimizer.momentum.then_some(DEFAULT_MOMENTUM),
        )?;
        let mut sampler = rng::stream(cfg.seed, Purpose::Sampler, self.model as u64);
        let batch_size = self.ds.num_cameras() * cfg.sampler.identities_per_camera * cfg.sampler.images_per_identity;
        let batches = self.ds.train_len().div_ceil(batch_size);
        let has_truth = self.ds.train_samples().all(|s| s.global_id.is_some());
        let mut multilabels = MultiLabelMap::singletons(self.ds);

        for round in 0..cfg.rounds {
            if self.associate {
                let tau = cfg.threshold(round)?;
                let (predicted, report) = if cfg.cycle_length == 2 {
                    let a = associate_all(params, self.ds, tau)?;
                    let report = has_truth.then(|| association_metrics(&a.pairs, self.ds)).transpose()?;
                    multilabels = a.multilabels;
                    (a.pairs.len(), report)
                } else {
                    let (tuples, map) = associate_cycles(params, self.ds, cfg.cycle_length, tau)?;
                    let cycles = camera_cycles(self.ds.num_cameras(), cfg.cycle_length);
                    let report = has_truth.then(|| cycle_metrics(&tuples, self.ds, &cycles)).transpose()?;
                    multilabels = map;
                    (tuples.len(), report)
                };
                log.rounds.push(RoundRecord {
                    model: self.model,
                    round,
                    seq: *seq,
                    tau,
                    predicted_pairs: predicted,
                    report,
                });
                *seq += 1;
            }
            for epoch in 0..cfg.epochs_in_round(round) {
                let mut sum = LossBreakdown { mt: 0.0, ml: 0.0, total: 0.0 };
                for b in 0..batches {
                    let batch = balanced_minibatch(self.ds, &cfg.sampler, &mut sampler)?;
                    let per_camera = cfg.sampler.identities_per_camera * cfg.sampler.images_per_identity;
                    assert!(batch.per_camera_counts().iter().all(|&c| c == per_camera), "unbalanced batch");
                    let (loss, grads) = self.objective.step(params, &batch, &multilabels).map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFiniteLoss { model: self.model, round, epoch, batch: b },
                        other => other,
                    })?;
                    if !loss.total.is_finite() {
                        return Err(Error::NonFiniteLoss { model: self.model, round, epoch, batch: b });
                    }
                    sgd_step(params, &grads, &mut opt);
                    sum.mt += loss.mt;
                    sum.ml += loss.ml;
                    sum.total += loss.total;
                }
                let n = batches as f64;
                log.epochs.push(EpochRecord {
                    model: self.model,
                    round,
                    epoch,
                    seq: *seq,
                    batches,
                    loss_mt: sum.mt / n,
                    loss_ml: sum.ml / n,
                    loss_total: sum.total / n,
                });
                *seq += 1;
            }
        }
        Ok(())
    }
}

/// Trains a model in the configured mode. Deterministic given the config
/// (including its seed) and the dataset.
pub fn train(ds: &IcsDataset, cfg: &TrainConfig) -> Result<(TrainedModel, TrainLog)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = build_model(ds, cfg.mode, &cfg.encoder, cfg.seed)?;
    let mut log =
        TrainLog { mode: cfg.mode, seed: cfg.seed, rounds: Vec::new(), epochs: Vec::new(), wall_clock_secs: 0.0 };
    let mut seq = 0;
    match cfg.mode {
        Mode::Epcs => {
            for p in 1..=ds.num_cameras() {
                let single = ds.single_camera(p)?;
                let lp = Loop {
                    ds: &single,
                    cfg,
                    model: p,
                    objective: Objective::MultiTask { lambda: 0.0 },
                    associate: false,
                };
                lp.run(&mut model.models[p - 1], &mut log, &mut seq)?;
            }
        }
        Mode::Mcst => {
            let offsets = ds
                .label_space_sizes()
                .iter()
                .scan(0, |acc, &n| {
                    let start = *acc;
                    *acc += n;
                    Some(start)
                })
                .collect();
            let lp = Loop { ds, cfg, model: 0, objective: Objective::Merged { offsets }, associate: false };
            lp.run(&mut model.models[0], &mut log, &mut seq)?;
        }
        Mode::Mate | Mode::MateNoCt | Mode::Pcmt => {
            let lp = Loop {
                ds,
                cfg,
                model: 0,
                objective: Objective::MultiTask { lambda: cfg.effective_lambda() },
                associate: cfg.mode.associates(),
            };
            lp.run(&mut model.models[0], &mut log, &mut seq)?;
        }
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, log))
}
