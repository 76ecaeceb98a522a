//! Desk-scale end-to-end experiment: a synthetic 4-class task with a
//! width-16 MLP, small enough to tune, meta-train and evaluate on one CPU.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::{aggregate_padded, speedup, sweep, AggregatedCurve, Family, OptimizerSpec, SweepGrid, SweepResult};
use crate::data::{make_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::global_opt::{OptimizerParams, Variant};
use crate::local_sim::{RoundConfig, Task, TrainingCurve};
use crate::meta::{meta_train_with, MetaConfig, MetaLogRow, MetaTrainResult};
use crate::nn::ArchSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSetup {
    pub data: SyntheticSpec,
    pub width: usize,
    pub workers: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub meta: MetaConfig,
    pub meta_seed: u64,
    pub sweep_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
}

impl Default for DeskSetup {
    fn default() -> Self {
        Self {
            data: SyntheticSpec {
                num_classes: 4,
                dims: 8,
                samples_per_class: 500,
                cluster_std: 0.35,
                seed: 7,
            },
            width: 16,
            workers: 4,
            local_steps: 4,
            batch_size: 64,
            rounds: 300,
            meta: MetaConfig {
                steps: 2000,
                trunc_min: 50,
                trunc_max: 300,
                checkpoint_every: 500,
                ..MetaConfig::default()
            },
            meta_seed: 1,
            sweep_seeds: vec![100, 101, 102],
            eval_seeds: (0..10).collect(),
        }
    }
}

/// Outcome of tuning local SGD and evaluating it on the evaluation seeds.
#[derive(Clone, Debug)]
pub struct Reference {
    pub gamma: f64,
    pub sweep: SweepResult,
    pub curves: Vec<TrainingCurve>,
    pub mean: AggregatedCurve,
}

impl DeskSetup {
    /// The task with `gamma` as its local learning rate.
    pub fn task(&self, gamma: f64) -> Result<Task> {
        let ds = make_synthetic(&self.data)?;
        let arch = ArchSpec::mlp2(self.data.dims, self.data.num_classes, self.width);
        let task = Task::new(
            "desk",
            arch,
            Arc::new(ds),
            RoundConfig::new(self.workers, self.local_steps, gamma, self.batch_size),
        );
        task.validate()?;
        Ok(task)
    }

    /// Grid-searches local SGD's gamma on the sweep seeds, then reruns the
    /// winner on the evaluation seeds.
    pub fn tune_local_sgd(&self) -> Result<Reference> {
        let task = self.task(1.0)?;
        let sw = sweep(&task, &SweepGrid::standard(Family::LocalSgd), self.rounds, &self.sweep_seeds)?;
        let spec = sw.best_point().spec.clone();
        let gamma = match spec {
            OptimizerSpec::LocalSgd { gamma } => gamma,
            _ => return Err(Error::Invalid("local SGD sweep returned another family".into())),
        };
        let curves = spec.run_seeds(&task, self.rounds, &self.eval_seeds)?;
        let mean = aggregate_padded(&curves, self.rounds)?;
        Ok(Reference {
            gamma,
            sweep: sw,
            curves,
            mean,
        })
    }

    /// Meta-trains `variant` on the task at local learning rate `gamma`.
    pub fn meta_train(
        &self,
        variant: Variant,
        gamma: f64,
        progress: &mut dyn FnMut(usize, &OptimizerParams, &MetaLogRow) -> Result<()>,
    ) -> Result<MetaTrainResult> {
        meta_train_with(&self.meta, vec![self.task(gamma)?], variant, self.meta_seed, progress)
    }

    pub fn evaluate(&self, spec: &OptimizerSpec) -> Result<(Vec<TrainingCurve>, AggregatedCurve)> {
        let curves = spec.run_seeds(&self.task(1.0)?, self.rounds, &self.eval_seeds)?;
        let mean = aggregate_padded(&curves, self.rounds)?;
        Ok((curves, mean))
    }

    /// Mean-curve speedup of a learned optimizer over the reference.
    pub fn learned_speedup(&self, reference: &Reference, phi: &OptimizerParams) -> Result<(Option<f64>, AggregatedCurve)> {
        let spec = OptimizerSpec::Learned {
            phi: Arc::new(phi.clone()),
            gamma: reference.gamma,
        };
        let (_, mean) = self.evaluate(&spec)?;
        Ok((speedup(&reference.mean, &mean), mean))
    }
}
