//! Command-line front end: `run`, `sweep`, `gradcheck`, `dump-relations`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, RunMode};
use crate::error::{Error, Result};
use crate::federation::{
    build_split, run_experiment, sample_unlabeled_relation, ExperimentOutcome, RelationDump,
    RoundConfig,
};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::numerics::read_checkpoint;
use crate::relation::{aggregate_relations, labeled_relation};
use crate::seed::{self, tag};

#[derive(Debug, Parser)]
#[command(name = "fedirm", about = "Federated semi-supervised learning with inter-client relation matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run(CommonArgs),
    /// Run a grid over labeled or unlabeled client counts.
    Sweep(SweepArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Dump relation matrices of a saved checkpoint.
    DumpRelations {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the mode.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// Number of labeled clients m; the remaining shards are unlabeled.
    Labeled,
    /// Number of unlabeled clients n with m fixed from the config.
    Unlabeled,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Labeled => "labeled",
            SweepAxis::Unlabeled => "unlabeled",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepAxis::Labeled => vec![1, 2, 3, 4],
            SweepAxis::Unlabeled => vec![1, 2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Axis values; defaults to 1,2,3,4 (labeled) or 1,2,4,8 (unlabeled).
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
}

/// Loads a config and applies command-line overrides.
pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if let Some(m) = &args.mode {
        cfg.mode = RunMode::parse(m)?;
    }
    cfg.resolved()
}

/// Runs an experiment and writes its output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let outcome = run_experiment(cfg)?;
    outcome.write(&outcome.config.output.dir)?;
    Ok(outcome)
}

pub const SWEEP_MODES: [RunMode; 3] = [RunMode::Fedirm, RunMode::FedConsistency, RunMode::FedavgLabeledOnly];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub mode: RunMode,
    pub labeled: usize,
    pub unlabeled: usize,
    pub runs: usize,
    pub failures: Vec<String>,
    pub auc: (f64, f64),
    pub accuracy: (f64, f64),
    pub f1: (f64, f64),
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const SWEEP_HEADER: &str =
    "axis,value,mode,labeled,unlabeled,runs,failures,auc_mean,auc_std,accuracy_mean,accuracy_std,f1_mean,f1_std";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SWEEP_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.axis.name(),
            r.value,
            r.mode.name(),
            r.labeled,
            r.unlabeled,
            r.runs,
            r.failures.len(),
            r.auc.0,
            r.auc.1,
            r.accuracy.0,
            r.accuracy.1,
            r.f1.0,
            r.f1.1
        );
    }
    out
}

/// Worker threads for sweep cells: `FEDIRM_THREADS`, else all cores.
pub fn sweep_threads() -> usize {
    std::env::var("FEDIRM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn cell_config(base: &ExperimentConfig, axis: SweepAxis, value: usize, mode: RunMode, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.mode = mode;
    cfg.seed = seed;
    let clients = cfg.federation.clients;
    match axis {
        SweepAxis::Labeled => {
            cfg.federation.labeled = value;
            cfg.federation.unlabeled = Some(clients.saturating_sub(value));
        }
        SweepAxis::Unlabeled => cfg.federation.unlabeled = Some(value),
    }
    cfg.output.dir = base
        .output
        .dir
        .join(format!("{}_{value}", axis.name()))
        .join(mode.name())
        .join(format!("seed_{seed}"));
    cfg
}

/// Runs `values x modes x seeds` experiments and summarizes each
/// `(value, mode)` cell. A failing run is recorded in its cell and the sweep
/// continues. With `write_runs` every run writes its own directory.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
    seeds: &[u64],
    write_runs: bool,
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() || values.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let clients = base.federation.clients;
    for &v in values {
        let ok = match axis {
            SweepAxis::Labeled => v >= 1 && v <= clients,
            SweepAxis::Unlabeled => base.federation.labeled + v <= clients,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{} = {v} is not valid for {clients} clients",
                axis.name()
            )));
        }
    }
    let jobs: Vec<(usize, RunMode, u64)> = values
        .iter()
        .flat_map(|&v| SWEEP_MODES.iter().flat_map(move |&m| seeds.iter().map(move |&s| (v, m, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<crate::metrics::EvalResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, m, s)| {
                let cfg = cell_config(base, axis, v, m, s);
                let outcome = if write_runs { cmd_run(&cfg) } else { run_experiment(&cfg) };
                outcome.map(|o| o.test)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut it = jobs.iter().zip(results);
    for &v in values {
        for &mode in &SWEEP_MODES {
            let mut evals = Vec::new();
            let mut failures = Vec::new();
            for _ in seeds {
                let (&(_, _, s), r) = it.next().expect("one result per job");
                match r {
                    Ok(e) => evals.push(e),
                    Err(e) => failures.push(format!("seed {s}: {e}")),
                }
            }
            let pick = |f: fn(&crate::metrics::EvalResult) -> f64| {
                mean_std(&evals.iter().map(f).collect::<Vec<_>>())
            };
            let probe = cell_config(base, axis, v, mode, seeds[0]);
            rows.push(SweepRow {
                axis,
                value: v,
                mode,
                labeled: probe.federation.labeled,
                unlabeled: if mode.uses_unlabeled() { probe.unlabeled_count() } else { 0 },
                runs: evals.len(),
                failures,
                auc: pick(|e| e.auc),
                accuracy: pick(|e| e.accuracy),
                f1: pick(|e| e.f1),
            });
        }
    }
    Ok(rows)
}

/// Relation matrices of a checkpoint: each labeled client's matrix, the
/// aggregate, a sampled unlabeled matrix and their absolute difference.
pub fn cmd_dump_relations(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    let params = read_checkpoint(checkpoint)?;
    let split = build_split(cfg)?;
    let rc = RoundConfig::from_experiment(cfg);
    let net = crate::numerics::Network::new(params, rc.activation, rc.dropout)?;
    if net.input_dim() != split.validation.dim() || net.classes() != split.validation.classes {
        return Err(Error::invalid("checkpoint does not match the configured data"));
    }
    let dir = cfg.output.dir.join("relations");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    let mut matrices = Vec::new();
    for client in &split.labeled {
        let m = labeled_relation(&net, client, rc.local.temperature)?;
        let path = dir.join(format!("labeled_{}.csv", client.id));
        m.write_csv(&path)?;
        written.push(path);
        matrices.push(m);
    }
    let dump = RelationDump {
        round: 0,
        aggregate: aggregate_relations(&matrices)?,
        unlabeled_sample: sample_unlabeled_relation(&net, &split, &rc.local, seed::derive(cfg.seed, tag::SAMPLE))?,
    };
    let path = dir.join("checkpoint.csv");
    fs::write(&path, dump.to_csv()?).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn cmd_gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    run_gradcheck(seed, trials)
}

fn error_line(e: &Error) -> String {
    format!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "))
}

/// Parses arguments, runs the subcommand, and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let outcome = cmd_run(&cfg)?;
            println!(
                "mode={} best_round={} test_auc={:.4} test_accuracy={:.4} out={}",
                outcome.config.mode.name(),
                outcome.best_round,
                outcome.test.auc,
                outcome.test.accuracy,
                outcome.config.output.dir.display()
            );
            Ok(0)
        }
        Command::Sweep(args) => {
            let cfg = load_config(&args.common)?;
            let values = args.values.clone().unwrap_or_else(|| args.axis.default_values());
            let rows = cmd_sweep(&cfg, args.axis, &values, &args.seeds, true)?;
            let csv = sweep_csv(&rows);
            let path = cfg.output.dir.join("summary.csv");
            fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::io(&cfg.output.dir, e))?;
            fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            print!("{csv}");
            for r in &rows {
                for f in &r.failures {
                    eprintln!("cell {}={} {}: {f}", r.axis.name(), r.value, r.mode.name());
                }
            }
            Ok(0)
        }
        Command::Gradcheck { seed, trials } => {
            let report = cmd_gradcheck(seed, trials)?;
            print!("{}", report.render());
            if report.passed() {
                Ok(0)
            } else {
                eprintln!(
                    "error[gradcheck]: relative error above {:e} for {}",
                    report.tolerance,
                    report.failures().join(",")
                );
                Ok(1)
            }
        }
        Command::DumpRelations { common, checkpoint } => {
            let cfg = load_config(&common)?;
            for p in cmd_dump_relations(&cfg, &checkpoint)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}
