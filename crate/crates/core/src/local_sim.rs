//! Simulated communication rounds: K workers each take H local SGD steps from
//! the shared global weights, report `delta = w_start - w_end`, and a global
//! optimizer turns the deltas into the next global weights.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::data::{sample_minibatch, Dataset, Split};
use crate::error::{Error, Result};
use crate::global_opt::GlobalOptimizer;
use crate::nn::{self, ArchSpec};
use crate::rng::{purpose, RngStream};
use crate::tensor::ModelParams;

/// Runs whose monitoring loss exceeds this are aborted and flagged diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// K
    pub workers: usize,
    /// H
    pub local_steps: usize,
    /// gamma
    pub local_lr: f64,
    /// B_loc
    pub batch_size: usize,
}

impl RoundConfig {
    pub fn new(workers: usize, local_steps: usize, local_lr: f64, batch_size: usize) -> Self {
        Self {
            workers,
            local_steps,
            local_lr,
            batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::field("K", "must be at least 1"));
        }
        if self.local_steps == 0 {
            return Err(Error::field("H", "must be at least 1"));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return Err(Error::field("gamma", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::field("b_loc", "must be at least 1"));
        }
        Ok(())
    }

    /// Samples consumed per round: `K * H * B_loc`.
    pub fn effective_batch(&self) -> usize {
        self.workers * self.local_steps * self.batch_size
    }
}

/// Something a worker can take SGD steps on. `stream` supplies the minibatch.
pub trait LocalObjective: Sync {
    fn loss_and_grad(&self, w: &ModelParams, stream: &mut RngStream) -> Result<(f64, ModelParams)>;
}

/// Per-worker deltas of one round and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerDeltas {
    pub per_worker: Vec<ModelParams>,
    pub average: ModelParams,
    /// Mean of the workers' end points, when known. Local-SGD averaging
    /// uses it directly so that `K = 1` reproduces the worker's weights
    /// exactly instead of through `w - (w - w_H)`.
    pub endpoint_mean: Option<ModelParams>,
}

impl WorkerDeltas {
    pub fn from_deltas(per_worker: Vec<ModelParams>) -> Result<Self> {
        let average = ModelParams::mean(&per_worker)?;
        Ok(Self {
            per_worker,
            average,
            endpoint_mean: None,
        })
    }

    pub fn from_endpoints(start: &ModelParams, endpoints: &[ModelParams]) -> Result<Self> {
        let per_worker = endpoints
            .iter()
            .map(|e| start.sub(e))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::from_deltas(per_worker)?;
        out.endpoint_mean = Some(ModelParams::mean(endpoints)?);
        Ok(out)
    }

    pub fn workers(&self) -> usize {
        self.per_worker.len()
    }
}

/// How workers map to random streams within a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamAssignment {
    /// Worker `k` uses `round_stream.derive(k)`.
    PerWorker,
    /// Every worker uses worker 0's stream (identical data on all workers).
    Shared,
}

/// One communication round. Workers run in parallel; each one's data comes
/// from its own keyed stream so the result does not depend on scheduling.
pub fn local_round(
    objective: &dyn LocalObjective,
    w: &ModelParams,
    cfg: &RoundConfig,
    round_stream: &RngStream,
    assignment: StreamAssignment,
) -> Result<WorkerDeltas> {
    cfg.validate()?;
    let endpoints = (0..cfg.workers)
        .into_par_iter()
        .map(|k| {
            let key = match assignment {
                StreamAssignment::PerWorker => k,
                StreamAssignment::Shared => 0,
            };
            let mut stream = round_stream.derive(key as u64);
            run_worker(objective, w, cfg, k, &mut stream)
        })
        .collect::<Result<Vec<_>>>()?;
    WorkerDeltas::from_endpoints(w, &endpoints)
}

fn run_worker(
    objective: &dyn LocalObjective,
    w: &ModelParams,
    cfg: &RoundConfig,
    worker: usize,
    stream: &mut RngStream,
) -> Result<ModelParams> {
    let mut wk = w.clone();
    for step in 0..cfg.local_steps {
        let diverged = |loss| Error::WorkerDiverged { worker, step, loss };
        let (loss, grad) = match objective.loss_and_grad(&wk, stream) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        wk.axpy(-cfg.local_lr, &grad)?;
        if !wk.all_finite() {
            return Err(diverged(loss));
        }
    }
    Ok(wk)
}

/// A supervised optimizee: architecture, data and round configuration.
#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub arch: ArchSpec,
    pub dataset: Arc<Dataset>,
    pub round: RoundConfig,
    /// Split the meta-objective is measured on.
    pub objective_split: Split,
    /// Split the per-round curve is recorded on (validation for sweeps).
    pub monitor_split: Split,
}

impl Task {
    pub fn new(name: impl Into<String>, arch: ArchSpec, dataset: Arc<Dataset>, round: RoundConfig) -> Self {
        Self {
            name: name.into(),
            arch,
            dataset,
            round,
            objective_split: Split::Train,
            monitor_split: Split::Train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.round.validate()?;
        self.dataset.validate()?;
        if self.arch.input_size() != self.dataset.sample_size() {
            return Err(Error::Shape(format!(
                "architecture expects {} inputs, dataset samples have {}",
                self.arch.input_size(),
                self.dataset.sample_size()
            )));
        }
        if self.arch.num_classes != self.dataset.num_classes {
            return Err(Error::Shape(format!(
                "architecture has {} classes, dataset {}",
                self.arch.num_classes, self.dataset.num_classes
            )));
        }
        if self.dataset.split(self.objective_split).is_empty() {
            return Err(Error::EmptySplit("objective split"));
        }
        if self.dataset.split(self.monitor_split).is_empty() {
            return Err(Error::EmptySplit("monitor split"));
        }
        Ok(())
    }

    pub fn init_weights(&self, seed: u64) -> Result<ModelParams> {
        nn::init_params(&self.arch, seed)
    }

    /// Loss on a fresh minibatch of `B_loc` samples from `split`.
    pub fn minibatch_loss(&self, w: &ModelParams, split: Split, stream: &mut RngStream) -> Result<f64> {
        let batch = sample_minibatch(&self.dataset, split, self.round.batch_size, stream)?;
        nn::loss_only(&self.arch, w, &batch)
    }

    fn grad_on(&self, w: &ModelParams, size: usize, stream: &mut RngStream) -> Result<(f64, ModelParams)> {
        let batch = sample_minibatch(&self.dataset, Split::Train, size, stream)?;
        nn::loss_and_grad(&self.arch, w, &batch)
    }
}

impl LocalObjective for Task {
    fn loss_and_grad(&self, w: &ModelParams, stream: &mut RngStream) -> Result<(f64, ModelParams)> {
        self.grad_on(w, self.round.batch_size, stream)
    }
}

/// Per-round monitoring losses of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    /// Loss after round `t` is at index `t - 1`.
    pub losses: Vec<f64>,
    pub comm_rounds: usize,
    pub seed: u64,
    pub optimizer: String,
    /// Round (1-based) at which the run was aborted, if it diverged.
    pub diverged_at: Option<usize>,
}

impl TrainingCurve {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn final_loss(&self) -> f64 {
        if self.diverged() {
            f64::INFINITY
        } else {
            self.losses.last().copied().unwrap_or(f64::INFINITY)
        }
    }

    /// Copy extended to `len` rounds, padding a diverged run with `+inf`.
    pub fn padded(&self, len: usize) -> Vec<f64> {
        let mut v = self.losses.clone();
        v.resize(len, f64::INFINITY);
        v.truncate(len);
        v
    }
}

fn round_stream(root: &RngStream, t: usize) -> RngStream {
    root.path(&[purpose::LOCAL, t as u64])
}

fn monitor_stream(root: &RngStream, t: usize) -> RngStream {
    root.path(&[purpose::MONITOR, t as u64])
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::WorkerDiverged { .. } | Error::NonFinite(_))
}

/// Trains from `init_params(arch, seed)` for `rounds` communication rounds.
/// Each round records the loss on a fresh `B_loc` minibatch of the monitor
/// split at the post-update weights. Divergence ends the run early with a flagged curve.
pub fn run_training(task: &Task, opt: &mut dyn GlobalOptimizer, rounds: usize, seed: u64) -> Result<TrainingCurve> {
    if rounds == 0 {
        return Err(Error::Invalid("rounds must be at least 1".into()));
    }
    task.validate()?;
    let root = RngStream::new(seed);
    let mut w = task.init_weights(seed)?;
    let mut curve = TrainingCurve {
        losses: Vec::with_capacity(rounds),
        comm_rounds: 0,
        seed,
        optimizer: opt.name(),
        diverged_at: None,
    };
    for t in 0..rounds {
        let step = local_round(task, &w, &task.round, &round_stream(&root, t), StreamAssignment::PerWorker)
            .and_then(|deltas| opt.step(&w, &deltas));
        curve.comm_rounds += 1;
        match step {
            Ok(next) => w = next,
            Err(e) if is_divergence(&e) => {
                curve.diverged_at = Some(t + 1);
                break;
            }
            Err(e) => return Err(e),
        }
        match task.minibatch_loss(&w, task.monitor_split, &mut monitor_stream(&root, t)) {
            Ok(l) if l <= DIVERGENCE_LOSS => curve.losses.push(l),
            Ok(_) => {
                curve.diverged_at = Some(t + 1);
                break;
            }
            Err(e) if is_divergence(&e) => {
                curve.diverged_at = Some(t + 1);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonLocalOptimizer {
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

impl NonLocalOptimizer {
    pub fn name(&self) -> String {
        match self {
            NonLocalOptimizer::Sgd { lr } => format!("sgd(lr={lr})"),
            NonLocalOptimizer::Adam { lr } => format!("adam(lr={lr})"),
        }
    }
}

/// Non-local baseline: one gradient per round on `K * H * B_loc` samples,
/// followed by one SGD or Adam step. Each step counts as one round.
///
/// The batch is drawn from the stream worker 0 would use in
/// [`run_training`], so with `K = H = 1` both see identical data.
pub fn run_nonlocal_baseline(task: &Task, opt: NonLocalOptimizer, rounds: usize, seed: u64) -> Result<TrainingCurve> {
    if rounds == 0 {
        return Err(Error::Invalid("rounds must be at least 1".into()));
    }
    task.validate()?;
    let root = RngStream::new(seed);
    let mut w = task.init_weights(seed)?;
    let mut adam = AdamState::new(w.num_params());
    let mut curve = TrainingCurve {
        losses: Vec::with_capacity(rounds),
        comm_rounds: 0,
        seed,
        optimizer: opt.name(),
        diverged_at: None,
    };
    let size = task.round.effective_batch();
    for t in 0..rounds {
        curve.comm_rounds += 1;
        let mut stream = round_stream(&root, t).derive(0);
        let grad = match task.grad_on(&w, size, &mut stream) {
            Ok((_, g)) => g,
            Err(e) if is_divergence(&e) => {
                curve.diverged_at = Some(t + 1);
                break;
            }
            Err(e) => return Err(e),
        };
        match opt {
            NonLocalOptimizer::Sgd { lr } => w.axpy(-lr, &grad)?,
            NonLocalOptimizer::Adam { lr } => {
                let mut flat = w.flatten();
                adam.step(&mut flat, &grad.flatten(), lr, 0.0)?;
                w.assign_flat(&flat)?;
            }
        }
        match task.minibatch_loss(&w, task.monitor_split, &mut monitor_stream(&root, t)) {
            Ok(l) if l <= DIVERGENCE_LOSS => curve.losses.push(l),
            Ok(_) => {
                curve.diverged_at = Some(t + 1);
                break;
            }
            Err(e) if is_divergence(&e) => {
                curve.diverged_at = Some(t + 1);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(curve)
}
