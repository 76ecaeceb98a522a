//! Baseline sweeps, multi-seed aggregation, communication metrics and reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global_opt::{GlobalOptimizer, LearnedOptimizer, LocalSgdAverage, OptimizerParams, SlowMo, SlowMoHyper};
use crate::local_sim::{run_nonlocal_baseline, run_training, NonLocalOptimizer, Task, TrainingCurve};

/// Learning rates searched for non-local SGD and Adam.
pub const LR_GRID: [f64; 11] = [1.0, 5e-1, 1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5];
/// Local learning rates searched for local SGD and SlowMo.
pub const LOCAL_LR_GRID: [f64; 4] = [1.0, 0.5, 0.3, 0.1];
/// SlowMo momentum values.
pub const SLOW_MOMENTUM_GRID: [f64; 11] = [0.99, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5];

/// Best baseline hyperparameters for one published configuration. The
/// SlowMo `alpha` is the slow learning rate itself, not the `c` multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TunedBaselines {
    pub configuration: &'static str,
    pub workers: usize,
    pub local_steps: usize,
    pub sgd_lr: f64,
    pub adam_lr: f64,
    pub local_gamma: f64,
    pub slowmo_gamma: f64,
    pub slowmo_alpha: f64,
    pub slowmo_beta: f64,
}

impl TunedBaselines {
    pub fn specs(&self) -> [OptimizerSpec; 4] {
        [
            OptimizerSpec::LocalSgd { gamma: self.local_gamma },
            OptimizerSpec::SlowMo {
                gamma: self.slowmo_gamma,
                alpha: self.slowmo_alpha,
                beta: self.slowmo_beta,
            },
            OptimizerSpec::Sgd { lr: self.sgd_lr },
            OptimizerSpec::Adam { lr: self.adam_lr },
        ]
    }
}

const fn tuned(
    configuration: &'static str,
    workers: usize,
    local_steps: usize,
    sgd_lr: f64,
    adam_lr: f64,
    local_gamma: f64,
    slowmo: (f64, f64, f64),
) -> TunedBaselines {
    TunedBaselines {
        configuration,
        workers,
        local_steps,
        sgd_lr,
        adam_lr,
        local_gamma,
        slowmo_gamma: slowmo.0,
        slowmo_alpha: slowmo.1,
        slowmo_beta: slowmo.2,
    }
}

/// Published best hyperparameters (training-loss tuning unless noted).
pub const TUNED_BASELINES: [TunedBaselines; 8] = [
    tuned("fmnist-mlp2-k8-h4", 8, 4, 0.1, 0.01, 0.3, (0.1, 1.0, 0.95)),
    tuned("fmnist-mlp2-k8-h8", 8, 8, 0.1, 0.005, 0.3, (0.1, 1.0, 0.95)),
    tuned("fmnist-mlp2-k8-h16", 8, 16, 0.1, 0.005, 0.1, (0.1, 1.0, 0.95)),
    tuned("fmnist-mlp2-k16-h4", 16, 4, 0.1, 0.005, 0.5, (0.1, 1.0, 0.95)),
    tuned("fmnist-mlp2-k32-h4", 32, 4, 0.1, 0.005, 0.5, (0.3, 1.66, 0.9)),
    tuned("cifar10-cnn-k8-h4", 8, 4, 1.0, 0.01, 1.0, (0.5, 2.0, 0.9)),
    tuned("imagenet-mlp3-k8-h4", 8, 4, 1.0, 0.001, 0.3, (0.1, 1.0, 0.85)),
    tuned("fmnist-mlp2-k8-h4-validation", 8, 4, 0.1, 0.001, 0.5, (0.3, 0.01, 0.8)),
];

pub fn tuned_baselines(configuration: &str) -> Option<&'static TunedBaselines> {
    TUNED_BASELINES.iter().find(|t| t.configuration == configuration)
}

/// A fully specified global optimizer for one evaluation.
#[derive(Clone, Debug)]
pub enum OptimizerSpec {
    LocalSgd { gamma: f64 },
    SlowMo { gamma: f64, alpha: f64, beta: f64 },
    Sgd { lr: f64 },
    Adam { lr: f64 },
    Learned { phi: Arc<OptimizerParams>, gamma: f64 },
}

impl OptimizerSpec {
    /// Short family name used as the curve label.
    pub fn family(&self) -> String {
        match self {
            OptimizerSpec::LocalSgd { .. } => "local_sgd".into(),
            OptimizerSpec::SlowMo { .. } => "slowmo".into(),
            OptimizerSpec::Sgd { .. } => "sgd".into(),
            OptimizerSpec::Adam { .. } => "adam".into(),
            OptimizerSpec::Learned { phi, .. } => phi.variant.name(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            OptimizerSpec::LocalSgd { gamma } => format!("local_sgd gamma={gamma}"),
            OptimizerSpec::SlowMo { gamma, alpha, beta } => {
                format!("slowmo gamma={gamma} alpha={alpha} beta={beta}")
            }
            OptimizerSpec::Sgd { lr } => format!("sgd lr={lr}"),
            OptimizerSpec::Adam { lr } => format!("adam lr={lr}"),
            OptimizerSpec::Learned { phi, gamma } => format!("{} gamma={gamma}", phi.variant.name()),
        }
    }

    /// Trains one seed. Local-update optimizers override the task's gamma.
    pub fn run(&self, task: &Task, rounds: usize, seed: u64) -> Result<TrainingCurve> {
        let with_gamma = |gamma: f64| {
            let mut t = task.clone();
            t.round.local_lr = gamma;
            t
        };
        let mut curve = match self {
            OptimizerSpec::LocalSgd { gamma } => run_training(&with_gamma(*gamma), &mut LocalSgdAverage, rounds, seed)?,
            OptimizerSpec::SlowMo { gamma, alpha, beta } => {
                let mut opt = SlowMo::new(SlowMoHyper {
                    alpha: *alpha,
                    beta: *beta,
                    gamma: *gamma,
                });
                run_training(&with_gamma(*gamma), &mut opt, rounds, seed)?
            }
            OptimizerSpec::Sgd { lr } => run_nonlocal_baseline(task, NonLocalOptimizer::Sgd { lr: *lr }, rounds, seed)?,
            OptimizerSpec::Adam { lr } => run_nonlocal_baseline(task, NonLocalOptimizer::Adam { lr: *lr }, rounds, seed)?,
            OptimizerSpec::Learned { phi, gamma } => {
                let mut opt: Box<dyn GlobalOptimizer> = Box::new(LearnedOptimizer::new((**phi).clone()));
                run_training(&with_gamma(*gamma), opt.as_mut(), rounds, seed)?
            }
        };
        curve.optimizer = self.family();
        Ok(curve)
    }

    /// Runs every seed (in parallel) and returns curves sorted by seed.
    pub fn run_seeds(&self, task: &Task, rounds: usize, seeds: &[u64]) -> Result<Vec<TrainingCurve>> {
        let mut curves = seeds
            .par_iter()
            .map(|&s| self.run(task, rounds, s))
            .collect::<Result<Vec<_>>>()?;
        curves.sort_by_key(|c| c.seed);
        Ok(curves)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Sgd,
    Adam,
    LocalSgd,
    SlowMo,
}

/// Value lists whose cross product is searched. For SlowMo, `alphas` are
/// multipliers `c` and the slow learning rate is `c / gamma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub family: Family,
    #[serde(default)]
    pub lrs: Vec<f64>,
    #[serde(default)]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub betas: Vec<f64>,
}

impl SweepGrid {
    /// The exhaustive grid searched for each baseline family.
    pub fn standard(family: Family) -> Self {
        let mut g = Self {
            family,
            lrs: vec![],
            gammas: vec![],
            alphas: vec![],
            betas: vec![],
        };
        match family {
            Family::Sgd | Family::Adam => g.lrs = LR_GRID.to_vec(),
            Family::LocalSgd => g.gammas = LOCAL_LR_GRID.to_vec(),
            Family::SlowMo => {
                g.gammas = LOCAL_LR_GRID.to_vec();
                g.alphas = LR_GRID.to_vec();
                g.betas = SLOW_MOMENTUM_GRID.to_vec();
            }
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        let need = |name: &str, v: &Vec<f64>| {
            if v.is_empty() {
                Err(Error::field(name, "grid list must be non-empty"))
            } else {
                Ok(())
            }
        };
        match self.family {
            Family::Sgd | Family::Adam => need("lrs", &self.lrs),
            Family::LocalSgd => need("gammas", &self.gammas),
            Family::SlowMo => {
                need("gammas", &self.gammas)?;
                need("alphas", &self.alphas)?;
                need("betas", &self.betas)
            }
        }
    }

    /// Grid points in enumeration order (outermost list first).
    pub fn points(&self) -> Vec<OptimizerSpec> {
        match self.family {
            Family::Sgd => self.lrs.iter().map(|&lr| OptimizerSpec::Sgd { lr }).collect(),
            Family::Adam => self.lrs.iter().map(|&lr| OptimizerSpec::Adam { lr }).collect(),
            Family::LocalSgd => self.gammas.iter().map(|&gamma| OptimizerSpec::LocalSgd { gamma }).collect(),
            Family::SlowMo => {
                let mut out = Vec::new();
                for &gamma in &self.gammas {
                    for &c in &self.alphas {
                        for &beta in &self.betas {
                            out.push(OptimizerSpec::SlowMo {
                                gamma,
                                alpha: c / gamma,
                                beta,
                            });
                        }
                    }
                }
                out
            }
        }
    }
}

/// Per-round mean and standard error across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedCurve {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub num_seeds: usize,
}

impl AggregatedCurve {
    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(f64::INFINITY)
    }

    pub fn min_mean(&self) -> f64 {
        self.mean.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Per-round mean and `sample_std / sqrt(n)`. Values are sorted before
/// summation, so the result does not depend on the order of `curves`.
pub fn aggregate(curves: &[TrainingCurve]) -> Result<AggregatedCurve> {
    let series: Vec<Vec<f64>> = curves.iter().map(|c| c.losses.clone()).collect();
    aggregate_series(&series)
}

/// As [`aggregate`], padding diverged runs to `rounds` with `+inf`.
pub fn aggregate_padded(curves: &[TrainingCurve], rounds: usize) -> Result<AggregatedCurve> {
    let series: Vec<Vec<f64>> = curves.iter().map(|c| c.padded(rounds)).collect();
    aggregate_series(&series)
}

pub fn aggregate_series(series: &[Vec<f64>]) -> Result<AggregatedCurve> {
    let first = series
        .first()
        .ok_or_else(|| Error::Invalid("aggregate needs at least one curve".into()))?;
    let len = first.len();
    if series.iter().any(|s| s.len() != len) {
        return Err(Error::Shape("curves have different lengths".into()));
    }
    let n = series.len();
    let mut mean = Vec::with_capacity(len);
    let mut stderr = Vec::with_capacity(len);
    let mut col = vec![0.0; n];
    for t in 0..len {
        for (c, s) in col.iter_mut().zip(series) {
            *c = s[t];
        }
        col.sort_by(f64::total_cmp);
        let m = col.iter().sum::<f64>() / n as f64;
        mean.push(m);
        if n > 1 && m.is_finite() {
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            stderr.push((var / n as f64).sqrt());
        } else if n > 1 {
            stderr.push(f64::INFINITY);
        } else {
            stderr.push(0.0);
        }
    }
    Ok(AggregatedCurve {
        mean,
        stderr,
        num_seeds: n,
    })
}

/// First 1-based round whose loss is at or below `threshold`.
pub fn rounds_to_loss(losses: &[f64], threshold: f64) -> Option<usize> {
    losses.iter().position(|&l| l <= threshold).map(|i| i + 1)
}

/// Rounds the reference needs to reach its own minimum mean loss, divided
/// by the rounds `other` needs to reach that same loss.
pub fn speedup(reference: &AggregatedCurve, other: &AggregatedCurve) -> Option<f64> {
    let target = reference.min_mean();
    let t_ref = rounds_to_loss(&reference.mean, target)?;
    let t_other = rounds_to_loss(&other.mean, target)?;
    Some(t_ref as f64 / t_other as f64)
}

/// Per-seed speedups (reference and other paired by position), reported as
/// mean and standard error over the seeds where `other` reaches the target.
/// `None` if no seed does.
pub fn speedup_per_seed(reference: &[TrainingCurve], other: &[TrainingCurve]) -> Option<(f64, f64)> {
    let ratios: Vec<f64> = reference
        .iter()
        .zip(other)
        .filter_map(|(r, o)| {
            let target = r.losses.iter().copied().fold(f64::INFINITY, f64::min);
            let tr = rounds_to_loss(&r.losses, target)?;
            let to = rounds_to_loss(&o.losses, target)?;
            Some(tr as f64 / to as f64)
        })
        .collect();
    if ratios.is_empty() {
        return None;
    }
    let agg = aggregate_series(&ratios.iter().map(|&r| vec![r]).collect::<Vec<_>>()).ok()?;
    Some((agg.mean[0], agg.stderr[0]))
}

/// Formats an optional metric, using `--` for "never reached".
pub fn fmt_metric<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "--".to_string(), |x| x.to_string())
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub spec: OptimizerSpec,
    pub curve: AggregatedCurve,
    pub diverged_seeds: usize,
}

impl SweepPoint {
    pub fn score(&self) -> f64 {
        let f = self.curve.final_mean();
        if f.is_nan() {
            f64::INFINITY
        } else {
            f
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub best: usize,
}

impl SweepResult {
    pub fn best_point(&self) -> &SweepPoint {
        &self.points[self.best]
    }
}

/// Evaluates every grid point on every seed and picks the lowest final-round
/// mean loss (the task's monitoring split decides train vs validation).
/// Ties go to the earlier grid point.
pub fn sweep(task: &Task, grid: &SweepGrid, rounds: usize, seeds: &[u64]) -> Result<SweepResult> {
    grid.validate()?;
    if seeds.is_empty() {
        return Err(Error::Invalid("sweep needs at least one seed".into()));
    }
    let points = grid
        .points()
        .into_par_iter()
        .map(|spec| {
            let curves = spec.run_seeds(task, rounds, seeds)?;
            let diverged_seeds = curves.iter().filter(|c| c.diverged()).count();
            Ok(SweepPoint {
                curve: aggregate_padded(&curves, rounds)?,
                spec,
                diverged_seeds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = None;
    for (i, p) in points.iter().enumerate() {
        if p.score().is_finite() && best.is_none_or(|b: usize| p.score() < points[b].score()) {
            best = Some(i);
        }
    }
    match best {
        Some(best) => Ok(SweepResult { points, best }),
        None => Err(Error::SweepDiverged(
            points
                .iter()
                .map(|p| format!("{}: {} of {} seeds diverged", p.spec.describe(), p.diverged_seeds, seeds.len()))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}

/// Everything written by [`emit_report`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// `(label, curve)` in report order; the first label is the default reference.
    pub curves: Vec<(String, AggregatedCurve)>,
    pub reference: String,
    pub threshold: Option<f64>,
    pub metrics: Vec<OptimizerMetrics>,
    /// Free-form configuration snapshot for reproducibility.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMetrics {
    pub optimizer: String,
    pub hyperparameters: String,
    pub final_loss: f64,
    pub min_loss: f64,
    pub speedup: Option<f64>,
    pub speedup_per_seed: Option<(f64, f64)>,
    pub rounds_to_threshold: Option<usize>,
}

impl BenchReport {
    /// Builds metrics for each `(label, hyperparameters, curves)` entry
    /// against the entry labelled `reference`.
    pub fn build(
        entries: &[(String, String, Vec<TrainingCurve>)],
        reference: &str,
        threshold: Option<f64>,
        rounds: usize,
        config: String,
    ) -> Result<Self> {
        let aggregated = entries
            .iter()
            .map(|(label, _, cs)| Ok((label.clone(), aggregate_padded(cs, rounds)?)))
            .collect::<Result<Vec<_>>>()?;
        let ref_idx = entries
            .iter()
            .position(|(l, _, _)| l == reference)
            .ok_or_else(|| Error::Invalid(format!("reference optimizer `{reference}` not in report")))?;
        let ref_curve = &aggregated[ref_idx].1;
        let metrics = entries
            .iter()
            .zip(&aggregated)
            .map(|((label, hyper, cs), (_, agg))| OptimizerMetrics {
                optimizer: label.clone(),
                hyperparameters: hyper.clone(),
                final_loss: agg.final_mean(),
                min_loss: agg.min_mean(),
                speedup: speedup(ref_curve, agg),
                speedup_per_seed: speedup_per_seed(&entries[ref_idx].2, cs),
                rounds_to_threshold: threshold.and_then(|th| rounds_to_loss(&agg.mean, th)),
            })
            .collect();
        Ok(Self {
            curves: aggregated,
            reference: reference.into(),
            threshold,
            metrics,
            config,
        })
    }
}

pub const CURVES_CSV: &str = "curves.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const CURVES_HEADER: &str = "round,optimizer,loss_mean,loss_stderr";

/// Writes `curves.csv`, `metrics.json` and `summary.txt` into `out_dir`.
/// Output is a pure function of the report.
pub fn emit_report(report: &BenchReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut csv = String::from(CURVES_HEADER);
    csv.push('\n');
    for (label, c) in &report.curves {
        for (t, (m, s)) in c.mean.iter().zip(&c.stderr).enumerate() {
            let _ = writeln!(csv, "{},{},{},{}", t + 1, label, m, s);
        }
    }

    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Invalid(e.to_string()))? + "\n";

    let mut txt = String::new();
    let _ = writeln!(txt, "reference: {}", report.reference);
    if let Some(th) = report.threshold {
        let _ = writeln!(txt, "threshold: {th}");
    }
    let _ = writeln!(
        txt,
        "{:<16} {:>12} {:>12} {:>10} {:>16} {:>10}  hyperparameters",
        "optimizer", "final_loss", "min_loss", "speedup", "speedup/seed", "rounds"
    );
    for m in &report.metrics {
        let per_seed = m
            .speedup_per_seed
            .map_or_else(|| "--".to_string(), |(mu, se)| format!("{mu:.2}±{se:.2}"));
        let _ = writeln!(
            txt,
            "{:<16} {:>12.5} {:>12.5} {:>10} {:>16} {:>10}  {}",
            m.optimizer,
            m.final_loss,
            m.min_loss,
            m.speedup.map_or_else(|| "--".to_string(), |s| format!("{s:.2}")),
            per_seed,
            fmt_metric(m.rounds_to_threshold),
            m.hyperparameters
        );
    }

    let files = [(CURVES_CSV, csv), (METRICS_JSON, json), (SUMMARY_TXT, txt)];
    files
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
