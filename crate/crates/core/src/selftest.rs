//! Quick invariant suite behind the `selftest` subcommand.

use std::sync::Arc;

use crate::bench::{aggregate_series, rounds_to_loss, speedup, AggregatedCurve};
use crate::data::{make_synthetic, sample_minibatch, Split, SyntheticSpec};
use crate::error::Result;
use crate::features::{compute_features, init_state, DecayCoeffs};
use crate::global_opt::{mlp_param_count, LocalSgdAverage, OptimizerParams, SlowMo, SlowMoHyper, Variant};
use crate::local_sim::{run_nonlocal_baseline, run_training, NonLocalOptimizer, RoundConfig, Task};
use crate::meta::{lr_schedule, MetaConfig};
use crate::nn::{self, ArchSpec};
use crate::rng::RngStream;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn small_task(k: usize, h: usize) -> Result<Task> {
    let ds = make_synthetic(&SyntheticSpec {
        num_classes: 3,
        dims: 4,
        samples_per_class: 30,
        cluster_std: 0.5,
        seed: 11,
    })?;
    Ok(Task::new("selftest", ArchSpec::mlp2(4, 3, 8), Arc::new(ds), RoundConfig::new(k, h, 0.3, 8)))
}

fn max_fd_error(arch: &ArchSpec) -> Result<f64> {
    let ds = make_synthetic(&SyntheticSpec {
        num_classes: arch.num_classes,
        dims: arch.input_size(),
        samples_per_class: 4,
        cluster_std: 1.0,
        seed: 3,
    })?;
    let mut batch = sample_minibatch(&ds, Split::Train, 4, &mut RngStream::new(5))?;
    batch.inputs = crate::tensor::Tensor::new(
        [vec![batch.len()], arch.input_shape.clone()].concat(),
        batch.inputs.into_data(),
    )?;
    let w = nn::init_params(arch, 9)?;
    let (_, g) = nn::loss_and_grad(arch, &w, &batch)?;
    let flat = w.flatten();
    let grad = g.flatten();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = w.clone();
    for i in (0..flat.len()).step_by((flat.len() / 40).max(1)) {
        let mut x = flat.clone();
        x[i] += h;
        probe.assign_flat(&x)?;
        let lp = nn::loss_only(arch, &probe, &batch)?;
        x[i] -= 2.0 * h;
        probe.assign_flat(&x)?;
        let lm = nn::loss_only(arch, &probe, &batch)?;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs every check; the suite passes when all results pass.
pub fn run_selftest() -> Vec<CheckResult> {
    vec![
        check("meta-parameter counts", || {
            let got = [
                mlp_param_count(Variant::LoptA.input_width()),
                mlp_param_count(Variant::LaggA { workers: 8 }.input_width()),
                mlp_param_count(Variant::LaggA { workers: 16 }.input_width()),
                mlp_param_count(Variant::LaggA { workers: 32 }.input_width()),
            ];
            Ok((got == [2402, 2626, 2882, 3394], format!("{got:?}")))
        }),
        check("finite-difference gradients", || {
            let archs = [
                ArchSpec::mlp2(5, 3, 6),
                ArchSpec::mlp3(5, 3, 6),
                ArchSpec::cnn3(6, 6, 2, 3).with_conv_channels([3, 4, 4]),
            ];
            let errs = archs.iter().map(max_fd_error).collect::<Result<Vec<_>>>()?;
            Ok((errs.iter().all(|&e| e < 1e-4), format!("max relative errors {errs:?}")))
        }),
        check("K=1 H=1 local SGD equals SGD", || {
            let task = small_task(1, 1)?;
            let a = run_training(&task, &mut LocalSgdAverage, 20, 4)?;
            let b = run_nonlocal_baseline(&task, NonLocalOptimizer::Sgd { lr: 0.3 }, 20, 4)?;
            Ok((a.losses == b.losses, "bitwise comparison over 20 rounds".into()))
        }),
        check("SlowMo(beta=0, alpha=1) equals averaging", || {
            let task = small_task(2, 3)?;
            let a = run_training(&task, &mut LocalSgdAverage, 20, 4)?;
            let mut slow = SlowMo::new(SlowMoHyper {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.3,
            });
            let b = run_training(&task, &mut slow, 20, 4)?;
            let diff = a.losses.iter().zip(&b.losses).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            Ok((diff < 1e-10, format!("max difference {diff:e}")))
        }),
        check("learning-rate schedule endpoints", || {
            let cfg = MetaConfig::default();
            let pts = [lr_schedule(0, &cfg), lr_schedule(100, &cfg), lr_schedule(cfg.steps - 1, &cfg)];
            Ok((pts == [3e-10, 3e-3, 1e-3], format!("{pts:?}")))
        }),
        check("speedup metric", || {
            let c = AggregatedCurve {
                mean: vec![1.0, 0.5, 0.4, 0.45],
                stderr: vec![0.0; 4],
                num_seeds: 1,
            };
            let never = AggregatedCurve {
                mean: vec![0.9; 4],
                ..c.clone()
            };
            let ok = speedup(&c, &c) == Some(1.0)
                && speedup(&c, &never).is_none()
                && rounds_to_loss(&c.mean, 0.5) == Some(2);
            Ok((ok, "self speedup, never-reached and threshold semantics".into()))
        }),
        check("aggregate permutation invariance", || {
            let a = vec![vec![0.3, 0.1], vec![0.7, 0.2], vec![0.11, 0.9]];
            let mut b = a.clone();
            b.reverse();
            let (x, y) = (aggregate_series(&a)?, aggregate_series(&b)?);
            Ok((x == y, "reversed seed order".into()))
        }),
        check("second-moment features non-negative", || {
            let task = small_task(2, 2)?;
            let w = task.init_weights(1)?;
            let delta = w.map(|x| x - 0.1);
            let mut state = init_state(&w);
            state.update(&delta, &DecayCoeffs::default())?;
            let f = compute_features(&w, &state, &delta)?;
            let ok = f.tensors.iter().all(|t| {
                (0..t.num_rows()).all(|r| {
                    let row = t.row(r);
                    row[crate::features::col::SECOND_MOMENT] >= 0.0 && row.iter().all(|v| v.is_finite())
                })
            });
            Ok((ok, "v >= 0 and all features finite".into()))
        }),
        check("checkpoint round-trip", || {
            let phi = OptimizerParams::init(Variant::LaggA { workers: 4 }, 2, 1.0);
            let back = OptimizerParams::from_json_str(&phi.to_json_string())?;
            Ok((back == phi, "JSON encode/decode".into()))
        }),
    ]
}
