//! Meta-training of learned optimizers with persistent evolution strategies.
//!
//! The meta-objective is the mean per-round loss of an optimizee trained by
//! the learned optimizer. Unrolls are split into short segments; each
//! antithetic particle pair keeps its optimizee state across segments and
//! accumulates the perturbations it has seen in `xi`, which keeps the
//! truncated gradient estimate unbiased. Pairs reset to a fresh optimizee at
//! the end of an episode, whose length is drawn log-uniformly.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::data::sample_minibatch;
use crate::error::{Error, Result};
use crate::features::AggregateState;
use crate::global_opt::{GlobalOptimizer, LearnedOptimizer, OptimizerParams, Variant};
use crate::local_sim::{local_round, StreamAssignment, Task, DIVERGENCE_LOSS};
use crate::nn;
use crate::rng::{purpose, RngStream};
use crate::tensor::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub steps: usize,
    /// Particles (optimizee instances) per meta-step.
    pub task_batch: usize,
    /// Antithetic pairs per meta-step; `task_batch` must equal `2 * pes_pairs`.
    pub pes_pairs: usize,
    pub trunc_min: usize,
    pub trunc_max: usize,
    pub pes_sigma: f64,
    /// Communication rounds per PES segment.
    pub segment_len: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    /// Std multiplier for the output layer of the initial MLP.
    pub init_output_scale: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            task_batch: 8,
            pes_pairs: 4,
            trunc_min: 100,
            trunc_max: 1000,
            pes_sigma: 0.01,
            segment_len: 10,
            lr_init: 3e-10,
            lr_peak: 3e-3,
            lr_final: 1e-3,
            warmup: 100,
            weight_decay: 1e-4,
            checkpoint_every: 500,
            init_output_scale: 1.0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::field(name, "must be positive"))
            }
        };
        positive("steps", self.steps > 0)?;
        positive("task_batch", self.task_batch > 0)?;
        positive("pes_pairs", self.pes_pairs > 0)?;
        if self.task_batch != 2 * self.pes_pairs {
            return Err(Error::field("task_batch", "must equal 2 * pes_pairs (antithetic pairs)"));
        }
        positive("trunc_min", self.trunc_min > 0)?;
        if self.trunc_min > self.trunc_max {
            return Err(Error::field("trunc_max", "must be >= trunc_min"));
        }
        positive("pes_sigma", self.pes_sigma > 0.0 && self.pes_sigma.is_finite())?;
        positive("segment_len", self.segment_len > 0)?;
        positive("lr_init", self.lr_init > 0.0)?;
        positive("lr_peak", self.lr_peak > 0.0)?;
        positive("lr_final", self.lr_final > 0.0)?;
        if self.warmup >= self.steps {
            return Err(Error::field("warmup", "must be smaller than steps"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::field("weight_decay", "must be non-negative"));
        }
        positive("checkpoint_every", self.checkpoint_every > 0)?;
        Ok(())
    }

    pub fn pairs(&self) -> usize {
        self.pes_pairs
    }
}

/// Linear warmup from `lr_init` to `lr_peak` over `warmup` steps, then cosine
/// decay reaching `lr_final` at the last meta-step (`steps - 1`).
pub fn lr_schedule(step: usize, cfg: &MetaConfig) -> f64 {
    if step < cfg.warmup {
        let f = step as f64 / cfg.warmup as f64;
        return cfg.lr_init * (1.0 - f) + cfg.lr_peak * f;
    }
    let span = cfg.steps.saturating_sub(1).saturating_sub(cfg.warmup);
    if span == 0 {
        return cfg.lr_peak;
    }
    let p = (step - cfg.warmup) as f64 / span as f64;
    if p >= 1.0 {
        return cfg.lr_final;
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    cfg.lr_peak * w + cfg.lr_final * (1.0 - w)
}

/// Episode length drawn log-uniformly from `[min, max]`.
pub fn sample_truncation(stream: &mut RngStream, min: usize, max: usize) -> usize {
    if min >= max {
        return min;
    }
    let (lo, hi) = ((min as f64).ln(), (max as f64).ln());
    let n = (lo + stream.uniform() * (hi - lo)).exp().round() as usize;
    n.clamp(min, max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentOutcome {
    pub mean_loss: f64,
    pub diverged: bool,
}

/// A truncatable unrolled computation whose mean loss PES differentiates.
pub trait UnrollObjective: Sync {
    type State: Clone + Send + Sync;

    /// Fresh episode state for particle-pair `slot`.
    fn reset(&self, slot: usize, stream: &RngStream) -> Result<Self::State>;

    /// Advances `state` by `rounds` steps under meta-parameters `theta`.
    /// `stream` is shared by both members of an antithetic pair.
    fn segment(&self, theta: &[f64], state: &mut Self::State, rounds: usize, stream: &RngStream) -> Result<SegmentOutcome>;
}

/// One member of an antithetic pair.
#[derive(Clone, Debug)]
pub struct PesParticle<S> {
    pub state: S,
    /// +1 or -1.
    pub sign: f64,
}

#[derive(Clone, Debug)]
pub struct PesPair<S> {
    pub slot: usize,
    pub plus: PesParticle<S>,
    pub minus: PesParticle<S>,
    /// Sum of the perturbations applied since the last reset.
    pub xi: Vec<f64>,
    pub episode: u64,
    pub episode_len: usize,
    pub remaining: usize,
    episode_stream: RngStream,
}

#[derive(Clone, Copy, Debug)]
pub struct Truncation {
    pub min: usize,
    pub max: usize,
}

impl<S: Clone> PesPair<S> {
    pub fn new<O: UnrollObjective<State = S>>(
        objective: &O,
        slot: usize,
        dim: usize,
        trunc: Truncation,
        root: &RngStream,
    ) -> Result<Self> {
        let state = objective.reset(slot, root)?;
        let mut pair = Self {
            slot,
            plus: PesParticle {
                state: state.clone(),
                sign: 1.0,
            },
            minus: PesParticle { state, sign: -1.0 },
            xi: vec![0.0; dim],
            episode: 0,
            episode_len: 0,
            remaining: 0,
            episode_stream: root.clone(),
        };
        pair.reset(objective, trunc, root)?;
        Ok(pair)
    }

    fn reset<O: UnrollObjective<State = S>>(&mut self, objective: &O, trunc: Truncation, root: &RngStream) -> Result<()> {
        let stream = root.path(&[purpose::EPISODE, self.slot as u64, self.episode]);
        let state = objective.reset(self.slot, &stream)?;
        self.plus.state = state.clone();
        self.minus.state = state;
        self.xi.iter_mut().for_each(|v| *v = 0.0);
        let mut ts = root.path(&[purpose::TRUNCATION, self.slot as u64, self.episode]);
        self.episode_len = sample_truncation(&mut ts, trunc.min, trunc.max);
        self.remaining = self.episode_len;
        self.episode_stream = stream;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PesEstimate {
    pub grad: Vec<f64>,
    /// Per-coordinate Monte-Carlo standard error across pairs.
    pub stderr: Vec<f64>,
    /// Mean over particles of the segment mean loss.
    pub mean_loss: f64,
    pub num_diverged: usize,
}

struct PairOutcome {
    contribution: Vec<f64>,
    mean_loss: f64,
    diverged: usize,
}

/// One PES step over all pairs: perturb, advance every particle by one
/// segment, and average `(L+ - L-) / (2 sigma^2) * xi` over pairs.
///
/// Pairs are independent and may run in parallel; the reduction is in pair
/// order so the estimate does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn pes_gradient<O: UnrollObjective>(
    theta: &[f64],
    pairs: &mut [PesPair<O::State>],
    objective: &O,
    sigma: f64,
    segment_len: usize,
    trunc: Truncation,
    root: &RngStream,
    step: u64,
) -> Result<PesEstimate> {
    if pairs.is_empty() {
        return Err(Error::Invalid("PES needs at least one antithetic pair".into()));
    }
    let dim = theta.len();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let outcomes = pairs
        .par_iter_mut()
        .map(|pair| -> Result<PairOutcome> {
            let mut es = root.path(&[purpose::PERTURB, step, pair.slot as u64]);
            let eps: Vec<f64> = (0..dim).map(|_| normal.sample(&mut es)).collect();
            for (x, e) in pair.xi.iter_mut().zip(&eps) {
                *x += e;
            }
            let len = segment_len.min(pair.remaining).max(1);
            let done = (pair.episode_len - pair.remaining) as u64;
            let seg_stream = pair.episode_stream.derive(done);
            let evaluate = |p: &mut PesParticle<O::State>| {
                let shifted: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t + p.sign * e).collect();
                objective.segment(&shifted, &mut p.state, len, &seg_stream)
            };
            let lp = evaluate(&mut pair.plus)?;
            let lm = evaluate(&mut pair.minus)?;
            let scale = (pair.plus.sign * lp.mean_loss + pair.minus.sign * lm.mean_loss) / (2.0 * sigma * sigma);
            let contribution = pair.xi.iter().map(|x| scale * x).collect();
            pair.remaining = pair.remaining.saturating_sub(len);
            let diverged = usize::from(lp.diverged) + usize::from(lm.diverged);
            if pair.remaining == 0 || diverged > 0 {
                pair.episode += 1;
                pair.reset(objective, trunc, root)?;
            }
            Ok(PairOutcome {
                contribution,
                mean_loss: 0.5 * (lp.mean_loss + lm.mean_loss),
                diverged,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = outcomes.len() as f64;
    let num_diverged: usize = outcomes.iter().map(|o| o.diverged).sum();
    if num_diverged == 2 * outcomes.len() {
        return Err(Error::AllDiverged(num_diverged));
    }
    let mut grad = vec![0.0; dim];
    for o in &outcomes {
        for (g, c) in grad.iter_mut().zip(&o.contribution) {
            *g += c;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    let stderr = if outcomes.len() > 1 {
        let mut var = vec![0.0; dim];
        for o in &outcomes {
            for ((v, c), g) in var.iter_mut().zip(&o.contribution).zip(&grad) {
                *v += (c - g) * (c - g);
            }
        }
        var.iter().map(|v| (v / (n - 1.0) / n).sqrt()).collect()
    } else {
        vec![0.0; dim]
    };
    Ok(PesEstimate {
        grad,
        stderr,
        mean_loss: outcomes.iter().map(|o| o.mean_loss).sum::<f64>() / n,
        num_diverged,
    })
}

/// Optimizee state carried by a PES particle.
#[derive(Clone, Debug)]
pub struct OptimizeeState {
    pub task: usize,
    pub w: ModelParams,
    pub accumulators: Option<AggregateState>,
    /// Communication rounds completed in this episode.
    pub round: usize,
}

/// Trains optimizees drawn from `tasks` with the learned optimizer whose
/// flat meta-parameters are perturbed by PES. Pair `slot` always uses task
/// `slot % tasks.len()`.
pub struct LearnedOptObjective {
    pub tasks: Vec<Task>,
    pub template: OptimizerParams,
}

impl LearnedOptObjective {
    pub fn new(tasks: Vec<Task>, template: OptimizerParams) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Invalid("meta-training needs at least one task".into()));
        }
        for t in &tasks {
            t.validate()?;
            if let Some(k) = template.variant.workers() {
                if t.round.workers != k {
                    return Err(Error::WorkerCount {
                        expected: k,
                        got: t.round.workers,
                    });
                }
            }
        }
        Ok(Self { tasks, template })
    }
}

/// Clip applied to per-segment losses: `20 ln(num_classes)`.
pub fn loss_clip(task: &Task) -> f64 {
    20.0 * (task.arch.num_classes as f64).ln()
}

/// Advances an optimizee by `rounds` communication rounds under `phi` and
/// returns the mean over rounds and workers of the post-update loss on fresh
/// minibatches from the task's objective split.
///
/// A diverged optimizee contributes the clip value for its remaining rounds.
pub fn meta_objective_segment(
    phi: &OptimizerParams,
    state: &mut OptimizeeState,
    task: &Task,
    rounds: usize,
    stream: &RngStream,
) -> Result<SegmentOutcome> {
    let clip = loss_clip(task);
    let mut opt = LearnedOptimizer {
        phi: phi.clone(),
        state: state.accumulators.take(),
    };
    let mut total = 0.0;
    let mut diverged = false;
    for r in 0..rounds {
        let rs = stream.derive(r as u64);
        let step = local_round(task, &state.w, &task.round, &rs.derive(purpose::LOCAL), StreamAssignment::PerWorker)
            .and_then(|d| opt.step(&state.w, &d));
        let next = match step {
            Ok(w) if w.all_finite() => w,
            Ok(_) | Err(Error::WorkerDiverged { .. }) | Err(Error::NonFinite(_)) => {
                diverged = true;
                total += clip * (rounds - r) as f64;
                break;
            }
            Err(e) => return Err(e),
        };
        state.w = next;
        state.round += 1;
        let mut round_loss = 0.0;
        for k in 0..task.round.workers {
            let mut os = rs.path(&[purpose::OBJECTIVE, k as u64]);
            let batch = sample_minibatch(&task.dataset, task.objective_split, task.round.batch_size, &mut os)?;
            let l = nn::loss_only(&task.arch, &state.w, &batch).unwrap_or(f64::INFINITY);
            round_loss += l;
        }
        round_loss /= task.round.workers as f64;
        if !round_loss.is_finite() || round_loss > DIVERGENCE_LOSS {
            diverged = true;
            total += clip * (rounds - r) as f64;
            break;
        }
        total += round_loss.min(clip);
    }
    state.accumulators = opt.state;
    Ok(SegmentOutcome {
        mean_loss: total / rounds as f64,
        diverged,
    })
}

impl UnrollObjective for LearnedOptObjective {
    type State = OptimizeeState;

    fn reset(&self, slot: usize, stream: &RngStream) -> Result<OptimizeeState> {
        let task = slot % self.tasks.len();
        let seed = stream.derive(purpose::INIT).key();
        Ok(OptimizeeState {
            task,
            w: self.tasks[task].init_weights(seed)?,
            accumulators: None,
            round: 0,
        })
    }

    fn segment(&self, theta: &[f64], state: &mut OptimizeeState, rounds: usize, stream: &RngStream) -> Result<SegmentOutcome> {
        let phi = self.template.with_flat(theta)?;
        let task = &self.tasks[state.task];
        meta_objective_segment(&phi, state, task, rounds, stream)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLogRow {
    pub meta_step: usize,
    pub lr: f64,
    pub mean_meta_loss: f64,
    pub num_diverged: usize,
}

pub const META_LOG_HEADER: &str = "meta_step,lr,mean_meta_loss,num_diverged";

impl MetaLogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{},{}",
            self.meta_step, self.lr, self.mean_meta_loss, self.num_diverged
        )
    }
}

#[derive(Clone, Debug)]
pub struct MetaTrainResult {
    pub phi: OptimizerParams,
    pub log: Vec<MetaLogRow>,
    /// `(meta_step, phi)` every `checkpoint_every` steps.
    pub checkpoints: Vec<(usize, OptimizerParams)>,
}

/// Called after every meta-step with the step index, current parameters and
/// its log row.
pub type MetaProgress<'a> = dyn FnMut(usize, &OptimizerParams, &MetaLogRow) -> Result<()> + 'a;

pub fn meta_train(cfg: &MetaConfig, tasks: Vec<Task>, variant: Variant, seed: u64) -> Result<MetaTrainResult> {
    meta_train_with(cfg, tasks, variant, seed, &mut |_, _, _| Ok(()))
}

/// Runs `cfg.steps` PES + AdamW meta-steps from a seeded initial MLP.
pub fn meta_train_with(
    cfg: &MetaConfig,
    tasks: Vec<Task>,
    variant: Variant,
    seed: u64,
    progress: &mut MetaProgress<'_>,
) -> Result<MetaTrainResult> {
    cfg.validate()?;
    let root = RngStream::new(seed).derive(purpose::META);
    let template = OptimizerParams::init(variant, root.derive(purpose::INIT).key(), cfg.init_output_scale);
    let objective = LearnedOptObjective::new(tasks, template.clone())?;
    let mut theta = template.to_flat();
    let trunc = Truncation {
        min: cfg.trunc_min,
        max: cfg.trunc_max,
    };
    let mut pairs = (0..cfg.pairs())
        .map(|slot| PesPair::new(&objective, slot, theta.len(), trunc, &root))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = AdamState::new(theta.len());
    let mut log = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    for step in 0..cfg.steps {
        let est = pes_gradient(
            &theta,
            &mut pairs,
            &objective,
            cfg.pes_sigma,
            cfg.segment_len,
            trunc,
            &root,
            step as u64,
        )
        .map_err(|e| match e {
            Error::AllDiverged(n) => Error::Invalid(format!(
                "meta-step {step}: all {n} particles diverged; aborting meta-training"
            )),
            other => other,
        })?;
        let lr = lr_schedule(step, cfg);
        adam.step(&mut theta, &est.grad, lr, cfg.weight_decay)?;
        let row = MetaLogRow {
            meta_step: step,
            lr,
            mean_meta_loss: est.mean_loss,
            num_diverged: est.num_diverged,
        };
        let phi = template.with_flat(&theta)?;
        if (step + 1) % cfg.checkpoint_every == 0 {
            checkpoints.push((step + 1, phi.clone()));
        }
        progress(step, &phi, &row)?;
        log.push(row);
    }
    Ok(MetaTrainResult {
        phi: template.with_flat(&theta)?,
        log,
        checkpoints,
    })
}
