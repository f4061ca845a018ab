//! Benchmark, ablation and associative-scope experiments.
//!
//! Every (mode, seed) run is independent and runs on the rayon pool. With a
//! synthetic dataset source the seed also reseeds the generator, so each
//! seed is a fresh draw of the benchmark.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{apply_overrides, strip_version};
use crate::data::{generate_synthetic, load_dataset, IcsDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, Metrics};
use crate::trainer::{train, Mode, Profile, TrainConfig, TrainLog};

/// Largest rank reported in the CMC curve of experiment outputs.
pub const MAX_RANK: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSource,
    pub modes: Vec<Mode>,
    #[serde(default = "desk")]
    pub profile: Profile,
    /// Partial [`TrainConfig`] merged over the profile.
    #[serde(default = "empty_object")]
    pub train: Value,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Mode trained by the associative-scope experiment.
    #[serde(default = "no_curriculum")]
    pub scope_mode: Mode,
}

fn no_curriculum() -> Mode {
    Mode::MateNoCt
}

fn desk() -> Profile {
    Profile::Desk
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl ExperimentSpec {
    /// The standard synthetic benchmark with every mode.
    pub fn synthetic(out_dir: impl Into<PathBuf>, seeds: Vec<u64>) -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SynthConfig::default()),
            modes: vec![Mode::Mcst, Mode::Epcs, Mode::Pcmt, Mode::Mate],
            profile: Profile::Desk,
            train: empty_object(),
            out_dir: out_dir.into(),
            seeds,
            scope_mode: no_curriculum(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let map = strip_version(serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?)?;
        let spec: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("experiment needs at least one mode".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let DatasetSource::Synthetic(cfg) = &self.dataset {
            cfg.validate()?;
        }
        if !self.scope_mode.associates() {
            return Err(Error::Config(format!("scope_mode {} does not associate", self.scope_mode)));
        }
        self.train_config(Mode::Mate, 0).map(|_| ())
    }

    pub fn train_config(&self, mode: Mode, seed: u64) -> Result<TrainConfig> {
        let base = TrainConfig::for_profile(self.profile);
        Ok(apply_overrides(&base, &self.train)?.with_mode(mode).with_seed(seed))
    }

    pub fn dataset(&self, seed: u64) -> Result<IcsDataset> {
        match &self.dataset {
            DatasetSource::Synthetic(cfg) => generate_synthetic(&SynthConfig { seed, ..cfg.clone() }),
            DatasetSource::Path(p) => load_dataset(p),
        }
    }

    fn datasets(&self) -> Result<Vec<(u64, IcsDataset)>> {
        self.seeds.par_iter().map(|&s| Ok((s, self.dataset(s)?))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub metrics: Metrics,
    pub cmc: Vec<f64>,
    #[serde(skip)]
    pub log: Option<TrainLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub mode: Mode,
    /// Mean over seeds.
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
    pub table: Vec<TableRow>,
}

impl BenchmarkReport {
    pub fn row(&self, mode: Mode) -> Option<&TableRow> {
        self.table.iter().find(|r| r.mode == mode)
    }

    pub fn run(&self, mode: Mode, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.mode == mode && r.seed == seed)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("method,R1,R10,R20,mAP\n");
        for r in &self.table {
            let m = r.metrics;
            writeln!(out, "{},{},{},{},{}", r.method, m.r1, m.r10, m.r20, m.map).expect("string write");
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("method,seed,R1,R10,R20,mAP\n");
        for r in &self.runs {
            let m = r.metrics;
            writeln!(out, "{},{},{},{},{},{}", r.mode.table_name(), r.seed, m.r1, m.r10, m.r20, m.map)
                .expect("string write");
        }
        out
    }
}

fn mean_metrics<'a>(ms: impl Iterator<Item = &'a Metrics>) -> Metrics {
    let (mut acc, mut n) = (Metrics { r1: 0.0, r10: 0.0, r20: 0.0, map: 0.0 }, 0.0);
    for m in ms {
        acc.r1 += m.r1;
        acc.r10 += m.r10;
        acc.r20 += m.r20;
        acc.map += m.map;
        n += 1.0;
    }
    Metrics { r1: acc.r1 / n, r10: acc.r10 / n, r20: acc.r20 / n, map: acc.map / n }
}

fn with_context(e: Error, what: String) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        Error::Data(m) => Error::Data(format!("{what}: {m}")),
        other => other,
    }
}

/// Trains and evaluates one mode on one dataset.
pub fn run_one(ds: &IcsDataset, cfg: &TrainConfig) -> Result<RunResult> {
    let (model, log) = train(ds, cfg)?;
    let eval = evaluate(&model, ds, MAX_RANK, false)?;
    Ok(RunResult { mode: cfg.mode, seed: cfg.seed, metrics: eval.metrics(), cmc: eval.cmc, log: Some(log) })
}

/// Runs every (mode, seed) pair and aggregates a per-mode table. Rows follow
/// the order of [`Mode::ALL`]. Nothing is written to disk.
pub fn benchmark(spec: &ExperimentSpec) -> Result<BenchmarkReport> {
    spec.validate()?;
    let datasets = spec.datasets()?;
    let modes: Vec<Mode> = Mode::ALL.into_iter().filter(|m| spec.modes.contains(m)).collect();
    let jobs: Vec<(Mode, usize)> = modes.iter().flat_map(|&m| (0..datasets.len()).map(move |i| (m, i))).collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(mode, i)| {
            let (seed, ds) = &datasets[i];
            let cfg = spec.train_config(mode, *seed)?;
            run_one(ds, &cfg).map_err(|e| with_context(e, format!("{mode} seed {seed}")))
        })
        .collect::<Result<_>>()?;
    let table = modes
        .iter()
        .map(|&mode| TableRow {
            method: mode.table_name().to_string(),
            mode,
            metrics: mean_metrics(runs.iter().filter(|r| r.mode == mode).map(|r| &r.metrics)),
        })
        .collect();
    Ok(BenchmarkReport { seeds: spec.seeds.clone(), runs, table })
}

fn write_report(report: &BenchmarkReport, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), report.table_csv())?;
    fs::write(dir.join(format!("{stem}_runs.csv")), report.runs_csv())?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(report)?)?;
    let logs = dir.join("logs");
    fs::create_dir_all(&logs)?;
    for r in &report.runs {
        if let Some(log) = &r.log {
            log.write_csv(logs.join(format!("{stem}_{}_seed{}.csv", r.mode, r.seed)))?;
        }
    }
    Ok(())
}

/// [`benchmark`] plus `benchmark.csv`, `benchmark_runs.csv`,
/// `benchmark.json` and per-run logs under the output directory.
pub fn run_benchmark(spec: &ExperimentSpec) -> Result<BenchmarkReport> {
    let report = benchmark(spec)?;
    write_report(&report, &spec.out_dir, "benchmark")?;
    Ok(report)
}

/// The component ablation: multi-task only, plus association at a fixed
/// threshold, plus the curriculum. Writes `ablation.*`.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<BenchmarkReport> {
    let spec = ExperimentSpec { modes: vec![Mode::Pcmt, Mode::MateNoCt, Mode::Mate], ..spec.clone() };
    let report = benchmark(&spec)?;
    write_report(&report, &spec.out_dir, "ablation")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeRun {
    pub cycle_length: usize,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub predicted: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeRow {
    pub cycle_length: usize,
    /// Final-round association precision, mean over seeds.
    pub precision: f64,
    pub recall: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeReport {
    pub runs: Vec<ScopeRun>,
    pub rows: Vec<ScopeRow>,
}

impl ScopeReport {
    pub fn row(&self, cycle_length: usize) -> Option<&ScopeRow> {
        self.rows.iter().find(|r| r.cycle_length == cycle_length)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("cycle_length,precision,recall,R1,mAP\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.cycle_length, r.precision, r.recall, r.metrics.r1, r.metrics.map)
                .expect("string write");
        }
        out
    }
}

/// Trains `spec.scope_mode` once per cycle length and seed, recording the
/// final-round association quality. Nothing is written to disk.
pub fn scope_experiment(spec: &ExperimentSpec, lengths: &[usize]) -> Result<ScopeReport> {
    spec.validate()?;
    if lengths.is_empty() {
        return Err(Error::Config("no cycle lengths requested".into()));
    }
    let longest = *lengths.iter().max().expect("nonempty");
    let datasets = spec.datasets()?;
    if let Some((_, ds)) = datasets.iter().find(|(_, ds)| ds.num_cameras() < longest) {
        return Err(Error::Config(format!(
            "cycles over {longest} cameras need at least {longest} cameras, dataset has {}",
            ds.num_cameras()
        )));
    }
    let jobs: Vec<(usize, usize)> = lengths.iter().flat_map(|&c| (0..datasets.len()).map(move |i| (c, i))).collect();
    let runs: Vec<ScopeRun> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let (seed, ds) = &datasets[i];
            let mut cfg = spec.train_config(spec.scope_mode, *seed)?;
            cfg.cycle_length = c;
            let run = run_one(ds, &cfg).map_err(|e| with_context(e, format!("cycle {c} seed {seed}")))?;
            let last = run.log.as_ref().and_then(TrainLog::final_round);
            let report = last
                .and_then(|r| r.report)
                .ok_or_else(|| Error::Data("scope experiment needs hidden identities in the training data".into()))?;
            Ok(ScopeRun {
                cycle_length: c,
                seed: *seed,
                precision: report.precision,
                recall: report.recall,
                predicted: report.predicted_pairs,
                metrics: run.metrics,
            })
        })
        .collect::<Result<_>>()?;
    let rows = lengths
        .iter()
        .map(|&c| {
            let these: Vec<&ScopeRun> = runs.iter().filter(|r| r.cycle_length == c).collect();
            let n = these.len() as f64;
            ScopeRow {
                cycle_length: c,
                precision: these.iter().map(|r| r.precision).sum::<f64>() / n,
                recall: these.iter().map(|r| r.recall).sum::<f64>() / n,
                metrics: mean_metrics(these.iter().map(|r| &r.metrics)),
            }
        })
        .collect();
    Ok(ScopeReport { runs, rows })
}

/// [`scope_experiment`] plus `scope.csv` and `scope.json`.
pub fn run_scope_experiment(spec: &ExperimentSpec, lengths: &[usize]) -> Result<ScopeReport> {
    let report = scope_experiment(spec, lengths)?;
    fs::create_dir_all(&spec.out_dir)?;
    fs::write(spec.out_dir.join("scope.csv"), report.csv())?;
    fs::write(spec.out_dir.join("scope.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::synthetic("out", vec![1, 2]);
        assert!(spec.validate().is_ok());
        spec.seeds = vec![1, 1];
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        spec.seeds = vec![1];
        spec.modes.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_file_round_trip() {
        let text = r#"{"schema_version":1,"dataset":{"synthetic":{"cameras":3}},"modes":["pcmt","mate"],
            "train":{"rounds":2},"out_dir":"o","seeds":[4]}"#;
        let spec = ExperimentSpec::parse(text).unwrap();
        assert_eq!(spec.profile, Profile::Desk);
        assert_eq!(spec.train_config(Mode::Pcmt, 4).unwrap().rounds, 2);
        assert!(ExperimentSpec::parse(
            r#"{"schema_version":1,"modes":[],"out_dir":"o","seeds":[1],"dataset":{"path":"x"}}"#
        )
        .is_err());
    }

    #[test]
    fn scope_rejects_too_few_cameras() {
        let mut spec = ExperimentSpec::synthetic("out", vec![0]);
        spec.dataset = DatasetSource::Synthetic(SynthConfig { cameras: 2, ..SynthConfig::default() });
        assert!(matches!(scope_experiment(&spec, &[2, 3]), Err(Error::Config(_))));
    }
}
