//! Command-line front end: `meta-train`, `evaluate`, `sweep`, `report`, `selftest`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::bench::{emit_report, rounds_to_loss, sweep, BenchReport, OptimizerMetrics};
use crate::config::{parse_meta_config, parse_run_config};
use crate::error::{Error, Result};
use crate::local_sim::TrainingCurve;
use crate::meta::{meta_train_with, META_LOG_HEADER};
use crate::selftest::run_selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const RUNS_JSON: &str = "runs.json";
pub const META_LOG_CSV: &str = "meta_log.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "index,hyperparameters,final_loss_mean,min_loss_mean,diverged_seeds";

#[derive(Debug, Parser)]
#[command(name = "commlearn", version, about = "Local SGD with learned global optimizers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML recipe.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory with dataset files (falls back to COMMLEARN_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory (overrides the recipe's `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for seeds, grid points and simulated workers.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a learned optimizer with PES.
    MetaTrain(CommonArgs),
    /// Train with each configured optimizer over several seeds and write curves.
    Evaluate(CommonArgs),
    /// Grid-search a baseline family.
    Sweep(CommonArgs),
    /// Merge `runs.json` files from earlier evaluations into one report.
    Report(ReportArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `runs.json` files written by `evaluate`.
    #[arg(long = "runs", required = true)]
    pub runs: Vec<PathBuf>,
    /// Label speedups are measured against (default: first curve).
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Raw per-seed curves from one `evaluate` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunsFile {
    pub rounds: usize,
    pub config: String,
    pub entries: Vec<RunsEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunsEntry {
    pub label: String,
    pub hyperparameters: String,
    pub curves: Vec<TrainingCurve>,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::MetaTrain(a) => with_jobs(a.jobs, || meta_train_cmd(&a)).map(|_| EXIT_OK),
        Command::Evaluate(a) => with_jobs(a.jobs, || evaluate_cmd(&a)).map(|_| EXIT_OK),
        Command::Sweep(a) => with_jobs(a.jobs, || sweep_cmd(&a)).map(|_| EXIT_OK),
        Command::Report(a) => report_cmd(&a).map(|_| EXIT_OK),
        Command::Selftest => Ok(selftest_cmd()),
    }
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(0) => Err(Error::Invalid("--jobs must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Invalid(e.to_string()))?
            .install(f),
    }
}

fn out_dir(flag: &Option<PathBuf>, recipe: &Option<PathBuf>, base: &Path) -> Result<PathBuf> {
    let dir = match (flag, recipe) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => base.join(p),
        (None, None) => return Err(Error::field("out", "no output directory (use --out or set `out`)")),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes `meta_log.csv`, `checkpoints/phi_step{N}.json`, `phi_final.json`
/// and a config snapshot.
pub fn meta_train_cmd(a: &CommonArgs) -> Result<PathBuf> {
    let cfg = parse_meta_config(&a.config)?;
    let base = base_dir(&a.config);
    let out = out_dir(&a.out, &cfg.out, &base)?;
    let seed = cfg.seed.unwrap_or(a.seed);
    let task = cfg.task.build("meta", a.data_dir.as_deref())?;
    let variant = cfg.variant_spec()?;
    write(&out.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut log = String::from(META_LOG_HEADER);
    log.push('\n');
    let every = cfg.meta.checkpoint_every;
    let steps = cfg.meta.steps;
    info!("meta-training {} for {steps} steps (seed {seed})", variant.name());
    let result = meta_train_with(&cfg.meta, vec![task], variant, seed, &mut |step, phi, row| {
        let _ = writeln!(log, "{}", row.to_csv());
        if (step + 1) % every == 0 {
            phi.save_json(ckpt_dir.join(format!("phi_step{}.json", step + 1)))?;
            info!("step {}: meta-loss {:.5}", step + 1, row.mean_meta_loss);
        }
        Ok(())
    })?;
    write(&out.join(META_LOG_CSV), &log)?;
    result.phi.save_json(out.join("phi_final.json"))?;
    Ok(out)
}

/// Writes the bench report plus `runs.json` and a config snapshot.
pub fn evaluate_cmd(a: &CommonArgs) -> Result<PathBuf> {
    let cfg = parse_run_config(&a.config)?;
    if cfg.optimizers.is_empty() {
        return Err(Error::field("optimizers", "evaluate needs at least one optimizer"));
    }
    let base = base_dir(&a.config);
    let out = out_dir(&a.out, &cfg.out, &base)?;
    let task = cfg.task.build("evaluate", a.data_dir.as_deref())?;
    let seeds = cfg.seed_list(a.seed);
    let snapshot = cfg.to_toml();
    let mut entries = Vec::new();
    for o in &cfg.optimizers {
        let spec = o.resolve(&cfg.task, &base)?;
        info!("evaluating {} on {} seeds", spec.describe(), seeds.len());
        let curves = spec.run_seeds(&task, cfg.rounds, &seeds)?;
        entries.push(RunsEntry {
            label: o.label(),
            hyperparameters: spec.describe(),
            curves,
        });
    }
    let runs = RunsFile {
        rounds: cfg.rounds,
        config: snapshot.clone(),
        entries,
    };
    write(&out.join(CONFIG_SNAPSHOT), &snapshot)?;
    write(
        &out.join(RUNS_JSON),
        &(serde_json::to_string_pretty(&runs).map_err(|e| Error::Invalid(e.to_string()))? + "\n"),
    )?;
    let reference = cfg.reference.clone().unwrap_or_else(|| runs.entries[0].label.clone());
    let report = report_from_runs(&[runs], &reference, cfg.threshold)?;
    emit_report(&report, &out)?;
    Ok(out)
}

fn report_from_runs(runs: &[RunsFile], reference: &str, threshold: Option<f64>) -> Result<BenchReport> {
    let rounds = runs.iter().map(|r| r.rounds).max().unwrap_or(0);
    let entries: Vec<_> = runs
        .iter()
        .flat_map(|r| &r.entries)
        .map(|e| (e.label.clone(), e.hyperparameters.clone(), e.curves.clone()))
        .collect();
    let config = runs.iter().map(|r| r.config.as_str()).collect::<Vec<_>>().join("\n");
    BenchReport::build(&entries, reference, threshold, rounds, config)
}

pub fn report_cmd(a: &ReportArgs) -> Result<PathBuf> {
    let runs = a
        .runs
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<RunsFile>(&text).map_err(|e| Error::format(p, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let first = runs
        .iter()
        .flat_map(|r| r.entries.first())
        .next()
        .ok_or_else(|| Error::Invalid("no curves in the given runs files".into()))?;
    let reference = a.reference.clone().unwrap_or_else(|| first.label.clone());
    let report = report_from_runs(&runs, &reference, a.threshold)?;
    emit_report(&report, &a.out)?;
    Ok(a.out.clone())
}

/// Writes `sweep.csv` (one row per grid point, in grid order) and a report
/// of the winning point.
pub fn sweep_cmd(a: &CommonArgs) -> Result<PathBuf> {
    let cfg = parse_run_config(&a.config)?;
    let sw = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::field("sweep", "sweep needs a [sweep] section"))?;
    let base = base_dir(&a.config);
    let out = out_dir(&a.out, &cfg.out, &base)?;
    let task = cfg.task.build("sweep", a.data_dir.as_deref())?;
    let seeds: Vec<u64> = (0..sw.num_seeds).map(|i| a.seed + i).collect();
    let grid = sw.grid();
    info!("sweeping {} grid points on {} seeds", grid.points().len(), seeds.len());
    let result = sweep(&task, &grid, cfg.rounds, &seeds)?;
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for (i, p) in result.points.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            i,
            p.spec.describe(),
            p.curve.final_mean(),
            p.curve.min_mean(),
            p.diverged_seeds
        );
    }
    let snapshot = cfg.to_toml();
    write(&out.join(SWEEP_CSV), &csv)?;
    write(&out.join(CONFIG_SNAPSHOT), &snapshot)?;
    let best = result.best_point();
    let label = best.spec.family();
    let report = BenchReport {
        curves: vec![(label.clone(), best.curve.clone())],
        reference: label.clone(),
        threshold: cfg.threshold,
        metrics: vec![OptimizerMetrics {
            optimizer: label,
            hyperparameters: best.spec.describe(),
            final_loss: best.curve.final_mean(),
            min_loss: best.curve.min_mean(),
            speedup: Some(1.0),
            speedup_per_seed: None,
            rounds_to_threshold: cfg
                .threshold
                .and_then(|t| rounds_to_loss(&best.curve.mean, t)),
        }],
        config: snapshot,
    };
    emit_report(&report, &out)?;
    println!("best: {}", best.spec.describe());
    Ok(out)
}

pub fn selftest_cmd() -> i32 {
    let results = run_selftest();
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}
