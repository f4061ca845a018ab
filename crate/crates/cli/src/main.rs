use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mate::assoc::{associate_all, association_metrics};
use mate::config::{load_synth_config, load_train_config};
use mate::data::{
    annotation_cost, generate_synthetic, ics_transform, load_dataset, load_fully_labelled, save_dataset, SynthConfig,
};
use mate::evalkit::{dump_embeddings, evaluate, extract_features};
use mate::experiment::{run_ablation, run_benchmark, run_scope_experiment, ExperimentSpec};
use mate::trainer::{association_stats_csv, rounds_from_log_csv, train, Mode, Profile, TrainConfig, TrainedModel};
use mate::{Error, ErrorKind};

/// Intra-camera supervised person re-identification.
#[derive(Parser)]
#[command(name = "mate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset generation, conversion and annotation cost.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset's query/gallery split.
    Eval(EvalArgs),
    /// Association statistics.
    #[command(subcommand)]
    Assoc(AssocCommand),
    /// Train and evaluate several modes over several seeds.
    Bench(BenchArgs),
    /// Baseline, constant-threshold association and full method side by side.
    Ablation(ExperimentArgs),
    /// Association quality as a function of camera-cycle length.
    Scope(ScopeArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write a synthetic dataset.
    Gen {
        /// Generator config (JSON with schema_version); defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leading-term pairwise comparison counts for N people in M cameras.
    Cost {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        m: u64,
    },
    /// Replace global labels by independent per-camera labels.
    Transform {
        /// Dataset file whose samples all carry `global_id`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training config (JSON with schema_version).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's mode.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base constants when the config names no profile.
    #[arg(long, default_value = "desk")]
    profile: Profile,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Event log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    max_rank: usize,
    /// L2-normalize features before ranking.
    #[arg(long)]
    normalize: bool,
    /// Directory for query.csv and gallery.csv feature dumps.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AssocCommand {
    /// Per-round statistics from a training log, or one association pass of
    /// a checkpoint at a given threshold.
    Stats {
        #[arg(long, conflicts_with_all = ["ckpt", "data", "tau"])]
        log: Option<PathBuf>,
        #[arg(long, requires_all = ["data", "tau"])]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec (JSON with schema_version). Without it the standard
    /// synthetic benchmark is used.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory; overrides the spec's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; override the spec's.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    profile: Option<Profile>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    /// Comma-separated modes; override the spec's.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<Mode>>,
}

#[derive(Args)]
struct ScopeArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    lengths: Vec<usize>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 3,
        ErrorKind::Data => 4,
        ErrorKind::Numeric => 5,
        ErrorKind::Io => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let kind = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(ErrorKind::Io, Error::kind);
            ExitCode::from(exit_code(kind))
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(Error::from).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes()).map_err(Error::from)?;
            Ok(())
        }
    }
}

fn json(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value).map_err(Error::from)? + "\n")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Data(DataCommand::Gen { config, seed, out }) => {
            let mut cfg = match &config {
                Some(p) => load_synth_config(p).with_context(|| format!("loading {}", p.display()))?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = generate_synthetic(&cfg)?;
            save_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} training samples, label spaces {:?}", ds.train_len(), ds.label_space_sizes());
        }
        Command::Data(DataCommand::Cost { n, m }) => emit(None, &json(&annotation_cost(n, m))?)?,
        Command::Data(DataCommand::Transform { input, out, seed }) => {
            let full = load_fully_labelled(&input).with_context(|| format!("loading {}", input.display()))?;
            let ds = ics_transform(&full, seed)?;
            save_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Train(a) => {
            let ds = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
            let mut cfg = match &a.config {
                Some(p) => load_train_config(p, a.profile).with_context(|| format!("loading {}", p.display()))?,
                None => TrainConfig::for_profile(a.profile),
            };
            if let Some(m) = a.mode {
                cfg.mode = m;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let (model, log) = train(&ds, &cfg)?;
            model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
            if let Some(p) = &a.log {
                log.write_csv(p).with_context(|| format!("writing {}", p.display()))?;
            }
            eprintln!("trained {} in {:.1}s", cfg.mode, log.wall_clock_secs);
        }
        Command::Eval(a) => {
            let model = TrainedModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
            let ds = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
            let result = evaluate(&model, &ds, a.max_rank, a.normalize)?;
            if let Some(dir) = &a.embeddings {
                fs::create_dir_all(dir).map_err(Error::from)?;
                dump_embeddings(&extract_features(&model, &ds.test().query)?, dir.join("query.csv"))?;
                dump_embeddings(&extract_features(&model, &ds.test().gallery)?, dir.join("gallery.csv"))?;
            }
            emit(a.out.as_deref(), &json(&result.metrics())?)?;
            eprintln!("{} queries scored, {} without a match", result.queries, result.skipped);
        }
        Command::Assoc(AssocCommand::Stats { log, ckpt, data, tau, out }) => {
            if let Some(p) = log {
                let text =
                    fs::read_to_string(&p).map_err(Error::from).with_context(|| format!("reading {}", p.display()))?;
                emit(out.as_deref(), &association_stats_csv(&rounds_from_log_csv(&text)?))?;
            } else if let (Some(c), Some(d), Some(tau)) = (ckpt, data, tau) {
                let model = TrainedModel::load(&c).with_context(|| format!("loading {}", c.display()))?;
                if !model.mode.associates() && model.mode != Mode::Pcmt {
                    return Err(Error::Config(format!("{} checkpoints have no per-camera heads", model.mode)).into());
                }
                let ds = load_dataset(&d).with_context(|| format!("loading {}", d.display()))?;
                let a = associate_all(&model.models[0], &ds, tau)?;
                let report = association_metrics(&a.pairs, &ds)?;
                let body = serde_json::json!({ "tau": tau, "report": report, "pairs": a.pairs });
                emit(out.as_deref(), &json(&body)?)?;
            } else {
                return Err(Error::Config("give --log, or --ckpt with --data and --tau".into()).into());
            }
        }
        Command::Bench(a) => {
            let mut spec = experiment_spec(&a.common)?;
            if let Some(modes) = a.modes {
                spec.modes = modes;
            }
            let report = run_benchmark(&spec)?;
            print!("{}", report.table_csv());
        }
        Command::Ablation(a) => {
            let report = run_ablation(&experiment_spec(&a)?)?;
            print!("{}", report.table_csv());
        }
        Command::Scope(a) => {
            let report = run_scope_experiment(&experiment_spec(&a.common)?, &a.lengths)?;
            print!("{}", report.csv());
        }
    }
    Ok(())
}

fn experiment_spec(a: &ExperimentArgs) -> Result<ExperimentSpec> {
    let mut spec = match &a.spec {
        Some(p) => ExperimentSpec::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentSpec::synthetic("results", vec![0, 1, 2]),
    };
    if let Some(o) = &a.out {
        spec.out_dir = o.clone();
    }
    if let Some(s) = &a.seeds {
        spec.seeds = s.clone();
    }
    if let Some(p) = a.profile {
        spec.profile = p;
    }
    spec.validate()?;
    Ok(spec)
}
