//! Acceptance gate: every criterion prints one PASS/FAIL line.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order and their verdicts are never captured. The extended FMNIST
//! criterion only runs with `--ignored`/`--include-ignored` and a data
//! directory in `COMMLEARN_DATA_DIR`.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Result};
use commlearn::bench::{
    aggregate_padded, emit_report, fmt_metric, rounds_to_loss, speedup, tuned_baselines, BenchReport, OptimizerSpec,
};
use commlearn::data::{load_fmnist, make_synthetic, resolve_data_dir, sample_minibatch, Split, SyntheticSpec};
use commlearn::desk::DeskSetup;
use commlearn::global_opt::{LocalSgdAverage, OptimizerParams, SlowMo, SlowMoHyper, Variant};
use commlearn::local_sim::{run_nonlocal_baseline, run_training, NonLocalOptimizer, RoundConfig, Task};
use commlearn::meta::{
    lr_schedule, meta_train_with, pes_gradient, sample_truncation, MetaConfig, PesPair, SegmentOutcome, Truncation,
    UnrollObjective,
};
use commlearn::nn::{self, ArchSpec};
use commlearn::rng::purpose;
use commlearn::{ModelParams, RngStream, Tensor};

type Criterion = (&'static str, &'static str, fn() -> Result<Verdict>);

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        passed,
        detail: detail.into(),
    })
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn mlp_count(n_in: usize) -> usize {
    (n_in * 32 + 32) + (32 * 32 + 32) + (32 * 2 + 2)
}

fn criterion_1() -> Result<Verdict> {
    let mut lines = Vec::new();
    let mut ok = true;
    let cases = [
        (Variant::LoptA, 2402),
        (Variant::LaggA { workers: 8 }, 2626),
        (Variant::LaggA { workers: 16 }, 2882),
        (Variant::LaggA { workers: 32 }, 3394),
    ];
    for (v, want) in cases {
        let phi = OptimizerParams::init(v, 0, 1.0);
        let got = phi.mlp_param_count();
        let layers: usize = phi.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
        ok &= got == want && layers == want && mlp_count(v.input_width()) == want;
        lines.push(format!("{}={got}", v.name()));
    }
    verdict(ok, lines.join(" "))
}

/// Central differences with step `h` over every parameter.
fn fd_check(arch: &ArchSpec, batch_size: usize, seed: u64) -> Result<(usize, f64)> {
    let ds = make_synthetic(&SyntheticSpec {
        num_classes: arch.num_classes,
        dims: arch.input_size(),
        samples_per_class: 8,
        cluster_std: 1.0,
        seed,
    })?;
    let mut batch = sample_minibatch(&ds, Split::Train, batch_size, &mut RngStream::new(seed))?;
    let shape = [vec![batch_size], arch.input_shape.clone()].concat();
    batch.inputs = Tensor::new(shape, batch.inputs.into_data())?;
    let w = nn::init_params(arch, seed)?;
    // non-zero biases so every bias path is exercised
    let w = w.map(|x| if x == 0.0 { 0.05 } else { x });
    let (_, grad) = nn::loss_and_grad(arch, &w, &batch)?;
    let grad = grad.flatten();
    let flat = w.flatten();
    let h = 1e-5;
    let mut probe = w.clone();
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut x = flat.clone();
        x[i] = flat[i] + h;
        probe.assign_flat(&x)?;
        let lp = nn::loss_only(arch, &probe, &batch)?;
        x[i] = flat[i] - h;
        probe.assign_flat(&x)?;
        let lm = nn::loss_only(arch, &probe, &batch)?;
        let fd = (lp - lm) / (2.0 * h);
        let err = (grad[i] - fd).abs();
        let ok = if fd.abs() > 1e-6 { err <= 1e-4 * fd.abs() } else { err <= 1e-6 };
        if fd.abs() > 1e-6 {
            worst = worst.max(err / fd.abs());
        }
        failures += usize::from(!ok);
    }
    Ok((failures, worst))
}

fn criterion_2() -> Result<Verdict> {
    let archs = [
        ("mlp2", ArchSpec::mlp2(6, 3, 16)),
        ("mlp3", ArchSpec::mlp3(6, 3, 16)),
        ("cnn3", ArchSpec::cnn3(6, 6, 2, 3).with_conv_channels([4, 8, 8])),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, arch) in &archs {
        let (failures, worst) = fd_check(arch, 8, 21)?;
        ok &= failures == 0;
        parts.push(format!("{name}: {failures} failures, max rel err {worst:.1e}"));
    }
    verdict(ok, parts.join("; "))
}

fn small_task(k: usize, h: usize, gamma: f64) -> Result<Task> {
    let ds = make_synthetic(&SyntheticSpec {
        num_classes: 3,
        dims: 5,
        samples_per_class: 40,
        cluster_std: 0.8,
        seed: 4,
    })?;
    Ok(Task::new("acceptance", ArchSpec::mlp2(5, 3, 12), Arc::new(ds), RoundConfig::new(k, h, gamma, 16)))
}

/// Plain SGD written against the documented stream layout: round `t` draws
/// its batch from `path([LOCAL, t]).derive(0)` and records the loss on a
/// batch from `path([MONITOR, t])`.
fn manual_sgd(task: &Task, gamma: f64, rounds: usize, seed: u64) -> Result<(Vec<f64>, ModelParams)> {
    let root = RngStream::new(seed);
    let mut w = nn::init_params(&task.arch, seed)?;
    let mut losses = Vec::new();
    for t in 0..rounds as u64 {
        let mut s = root.path(&[purpose::LOCAL, t]).derive(0);
        let b = sample_minibatch(&task.dataset, Split::Train, task.round.batch_size, &mut s)?;
        let (_, g) = nn::loss_and_grad(&task.arch, &w, &b)?;
        w = w.zip_map(&g, |x, gi| x - gamma * gi)?;
        let mut m = root.path(&[purpose::MONITOR, t]);
        let mb = sample_minibatch(&task.dataset, Split::Train, task.round.batch_size, &mut m)?;
        losses.push(nn::loss_only(&task.arch, &w, &mb)?);
    }
    Ok((losses, w))
}

fn criterion_3() -> Result<Verdict> {
    let gamma = 0.3;
    let task = small_task(1, 1, gamma)?;
    let local = run_training(&task, &mut LocalSgdAverage, 50, 12)?;
    let (manual, _) = manual_sgd(&task, gamma, 50, 12)?;
    let nonlocal = run_nonlocal_baseline(&task, NonLocalOptimizer::Sgd { lr: gamma }, 50, 12)?;
    let bitwise = local.losses.len() == 50
        && local.losses.iter().zip(&manual).all(|(a, b)| a.to_bits() == b.to_bits())
        && local.losses == nonlocal.losses;

    let task = small_task(4, 3, gamma)?;
    let avg = run_training(&task, &mut LocalSgdAverage, 50, 12)?;
    let mut slow = SlowMo::new(SlowMoHyper {
        alpha: 1.0,
        beta: 0.0,
        gamma,
    });
    let sm = run_training(&task, &mut slow, 50, 12)?;
    let diff = avg
        .losses
        .iter()
        .zip(&sm.losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // gamma * (delta / gamma) is not bitwise delta; allow rounding only
    let equal = avg.losses.len() == 50 && sm.losses.len() == 50 && diff <= 1e-9;
    verdict(
        bitwise && equal,
        format!("(a) bitwise={bitwise}; (b) max |diff| over 50 rounds = {diff:.1e} (tolerance 1e-9)"),
    )
}

struct HalfSquaredNorm;

impl UnrollObjective for HalfSquaredNorm {
    type State = ();

    fn reset(&self, _: usize, _: &RngStream) -> commlearn::Result<()> {
        Ok(())
    }

    fn segment(&self, theta: &[f64], _: &mut (), _: usize, _: &RngStream) -> commlearn::Result<SegmentOutcome> {
        Ok(SegmentOutcome {
            mean_loss: 0.5 * theta.iter().map(|t| t * t).sum::<f64>(),
            diverged: false,
        })
    }
}

fn criterion_4() -> Result<Verdict> {
    let theta = vec![1.0; 10];
    let trunc = Truncation { min: 1, max: 1 };
    let root = RngStream::new(4);
    let mut pairs = (0..2000)
        .map(|s| PesPair::new(&HalfSquaredNorm, s, 10, trunc, &root))
        .collect::<commlearn::Result<Vec<_>>>()?;
    let est = pes_gradient(&theta, &mut pairs, &HalfSquaredNorm, 0.01, 1, trunc, &root, 0)?;
    let worst = est
        .grad
        .iter()
        .zip(&est.stderr)
        .zip(&theta)
        .map(|((g, se), t)| (g - t).abs() / se)
        .fold(0.0, f64::max);
    verdict(worst <= 3.0, format!("2000 pairs, max |estimate - gradient| = {worst:.2} standard errors"))
}

fn criterion_5() -> Result<Verdict> {
    let cfg = MetaConfig::default();
    let (a, b, c) = (lr_schedule(0, &cfg), lr_schedule(100, &cfg), lr_schedule(cfg.steps - 1, &cfg));
    let endpoints = a == 3e-10 && b == 3e-3 && c == 1e-3;
    let mut s = RngStream::new(55);
    let mut draws: Vec<usize> = (0..100_000).map(|_| sample_truncation(&mut s, 100, 1000)).collect();
    let in_range = draws.iter().all(|&n| (100..=1000).contains(&n));
    draws.sort_unstable();
    let median = 0.5 * (draws[49_999] + draws[50_000]) as f64;
    let median_ok = (median - 316.0).abs() <= 0.05 * 316.0;
    verdict(
        endpoints && in_range && median_ok,
        format!("lr(0)={a:e} lr(100)={b:e} lr(final)={c:e}; samples in range={in_range}; median={median}"),
    )
}

fn criterion_6() -> Result<Verdict> {
    let task = small_task(2, 2, 0.3)?;
    let curves = OptimizerSpec::LocalSgd { gamma: 0.3 }.run_seeds(&task, 40, &[0, 1, 2])?;
    let mean = aggregate_padded(&curves, 40)?;
    let self_speedup = speedup(&mean, &mean);
    let self_ok = self_speedup == Some(1.0) && format!("{:.2}", self_speedup.unwrap_or(0.0)) == "1.00";

    let mut rng = RngStream::new(6);
    let mut monotone = true;
    for _ in 0..1000 {
        let len = 1 + rng.below(100);
        let c: Vec<f64> = (0..len).map(|_| rng.uniform()).collect();
        let (t1, t2) = (rng.uniform(), rng.uniform());
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        match (rounds_to_loss(&c, lo), rounds_to_loss(&c, hi)) {
            (Some(a), Some(b)) => monotone &= b <= a,
            (Some(_), None) => monotone = false,
            _ => {}
        }
    }

    // a curve that never reaches the reference minimum is reported as "--"
    let never = vec![curves[0].clone()]
        .into_iter()
        .map(|mut c| {
            c.losses.iter_mut().for_each(|l| *l = 10.0);
            c
        })
        .collect::<Vec<_>>();
    let entries = vec![
        ("local_sgd".to_string(), "gamma=0.3".to_string(), curves.clone()),
        ("stuck".to_string(), "n/a".to_string(), never),
    ];
    let report = BenchReport::build(&entries, "local_sgd", None, 40, String::new())?;
    let dir = tempfile::tempdir()?;
    emit_report(&report, dir.path())?;
    let summary = std::fs::read_to_string(dir.path().join("summary.txt"))?;
    let stuck_line = summary.lines().find(|l| l.starts_with("stuck")).unwrap_or("");
    let hyphen = report.metrics[1].speedup.is_none()
        && fmt_metric::<f64>(None) == "--"
        && stuck_line.split_whitespace().nth(3) == Some("--");
    verdict(
        self_ok && monotone && hyphen,
        format!("speedup(local, local)={self_speedup:?}; monotone over 1000 curves={monotone}; hyphen={hyphen}"),
    )
}

struct DeskOutcome {
    lopt_a: Option<f64>,
    lagg_a: Option<f64>,
    ablation: (f64, f64),
    detail: String,
}

fn desk_scale() -> Result<DeskOutcome> {
    let setup = DeskSetup::default();
    let started = Instant::now();
    let reference = setup.tune_local_sgd()?;
    say(&format!(
        "  desk: tuned local SGD gamma={} (min mean loss {:.5} at round {}) [{:.0?}]",
        reference.gamma,
        reference.mean.min_mean(),
        fmt_metric(rounds_to_loss(&reference.mean.mean, reference.mean.min_mean())),
        started.elapsed()
    ));
    let train = |variant: Variant| -> Result<OptimizerParams> {
        let t0 = Instant::now();
        let res = setup.meta_train(variant, reference.gamma, &mut |step, _, row| {
            if (step + 1) % 500 == 0 {
                say(&format!(
                    "  desk: {} meta-step {} meta-loss {:.5} [{:.0?}]",
                    variant.name(),
                    step + 1,
                    row.mean_meta_loss,
                    t0.elapsed()
                ));
            }
            Ok(())
        })?;
        Ok(res.phi)
    };
    let lopt_a = train(Variant::LoptA)?;
    let lagg_a = train(Variant::LaggA { workers: setup.workers })?;
    let lopt_plain = train(Variant::LoptPlain)?;

    let (s_lopt, c_lopt) = setup.learned_speedup(&reference, &lopt_a)?;
    let (s_lagg, c_lagg) = setup.learned_speedup(&reference, &lagg_a)?;
    let (_, c_plain) = setup.learned_speedup(&reference, &lopt_plain)?;
    let detail = format!(
        "reference min {:.5}; LOpt-A reaches it at round {} (final {:.2e}); LAgg-A at round {} (final {:.2e}) [{:.0?}]",
        reference.mean.min_mean(),
        fmt_metric(rounds_to_loss(&c_lopt.mean, reference.mean.min_mean())),
        c_lopt.final_mean(),
        fmt_metric(rounds_to_loss(&c_lagg.mean, reference.mean.min_mean())),
        c_lagg.final_mean(),
        started.elapsed()
    );
    Ok(DeskOutcome {
        lopt_a: s_lopt,
        lagg_a: s_lagg,
        ablation: (c_lopt.final_mean(), c_plain.final_mean()),
        detail,
    })
}

fn criterion_7(desk: &DeskOutcome) -> Result<Verdict> {
    let ok = desk.lopt_a.is_some_and(|s| s >= 2.0) && desk.lagg_a.is_some_and(|s| s >= 2.0);
    verdict(
        ok,
        format!(
            "speedup LOpt-A={} LAgg-A={} (need >= 2.0); {}",
            fmt_metric(desk.lopt_a.map(|s| format!("{s:.2}"))),
            fmt_metric(desk.lagg_a.map(|s| format!("{s:.2}"))),
            desk.detail
        ),
    )
}

fn criterion_9(desk: &DeskOutcome) -> Result<Verdict> {
    let (with_ada, plain) = desk.ablation;
    verdict(
        with_ada <= plain,
        format!("10-seed final loss LOpt-A={with_ada:.3e} vs LOpt-plain={plain:.3e}"),
    )
}

/// FMNIST mlp2, K=8, H=4, T=1000 against the published tuned baselines.
fn criterion_8() -> Result<Verdict> {
    let dir = resolve_data_dir(None).ok_or_else(|| anyhow!("set COMMLEARN_DATA_DIR to the FMNIST directory"))?;
    let ds = Arc::new(load_fmnist(dir)?);
    let tuned = tuned_baselines("fmnist-mlp2-k8-h4").ok_or_else(|| anyhow!("missing tuned baselines"))?;
    let input: usize = ds.sample_shape().iter().product();
    let task = Task::new(
        "fmnist",
        ArchSpec::mlp2(input, 10, 128),
        ds.clone(),
        RoundConfig::new(8, 4, tuned.local_gamma, 128),
    );
    let seeds: Vec<u64> = (0..10).collect();
    let local = OptimizerSpec::LocalSgd { gamma: tuned.local_gamma }.run_seeds(&task, 1000, &seeds)?;
    let local = aggregate_padded(&local, 1000)?;
    let meta = MetaConfig::default();
    let res = meta_train_with(&meta, vec![task.clone()], Variant::LaggA { workers: 8 }, 1, &mut |_, _, _| Ok(()))?;
    let spec = OptimizerSpec::Learned {
        phi: Arc::new(res.phi.clone()),
        gamma: tuned.local_gamma,
    };
    let lagg = aggregate_padded(&spec.run_seeds(&task, 1000, &seeds)?, 1000)?;
    let s = speedup(&local, &lagg);

    let t16 = tuned_baselines("fmnist-mlp2-k8-h16").ok_or_else(|| anyhow!("missing tuned baselines"))?;
    let task16 = Task {
        round: RoundConfig::new(8, 16, t16.local_gamma, 128),
        ..task
    };
    let slowmo = t16.specs()[1].run_seeds(&task16, 1000, &seeds)?;
    let slowmo = aggregate_padded(&slowmo, 1000)?;
    let res16 = meta_train_with(&meta, vec![task16.clone()], Variant::LaggA { workers: 8 }, 1, &mut |_, _, _| Ok(()))?;
    let lagg16 = OptimizerSpec::Learned {
        phi: Arc::new(res16.phi),
        gamma: t16.local_gamma,
    }
    .run_seeds(&task16, 1000, &seeds)?;
    let lagg16 = aggregate_padded(&lagg16, 1000)?;
    let (r_lagg, r_slow) = (rounds_to_loss(&lagg16.mean, 0.2), rounds_to_loss(&slowmo.mean, 0.2));
    let beats = match (r_lagg, r_slow) {
        (Some(a), Some(b)) => a < b,
        (Some(_), None) => true,
        _ => false,
    };
    verdict(
        s.is_some_and(|x| x >= 4.0) && beats,
        format!(
            "speedup={}; rounds to 0.2 at H=16: LAgg-A={} SlowMo={}",
            fmt_metric(s.map(|x| format!("{x:.2}"))),
            fmt_metric(r_lagg),
            fmt_metric(r_slow)
        ),
    )
}

fn report(id: &str, name: &str, v: Result<Verdict>, failures: &mut usize) {
    match v {
        Ok(v) => {
            say(&format!("{} criterion {id} ({name}): {}", if v.passed { "PASS" } else { "FAIL" }, v.detail));
            *failures += usize::from(!v.passed);
        }
        Err(e) => {
            say(&format!("FAIL criterion {id} ({name}): error: {e}"));
            *failures += 1;
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let extended = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    // bare numeric arguments select criteria; none selects all
    let picked: Vec<&str> = args[1..].iter().map(String::as_str).filter(|a| a.parse::<u32>().is_ok()).collect();
    let want = |id: &str| picked.is_empty() || picked.contains(&id);
    let mut failures = 0;
    let fast: [Criterion; 6] = [
        ("1", "meta-parameter counts", criterion_1),
        ("2", "gradient correctness", criterion_2),
        ("3", "reduction equivalences", criterion_3),
        ("4", "PES oracle", criterion_4),
        ("5", "schedule endpoints and truncation", criterion_5),
        ("6", "metric semantics", criterion_6),
    ];
    for (id, name, f) in fast {
        if want(id) {
            report(id, name, f(), &mut failures);
        }
    }
    if want("7") || want("9") {
        match desk_scale() {
            Ok(desk) => {
                report("7", "desk-scale end-to-end", criterion_7(&desk), &mut failures);
                report("9", "Ada-feature ablation", criterion_9(&desk), &mut failures);
            }
            Err(e) => {
                say(&format!("FAIL criterion 7 (desk-scale end-to-end): error: {e}"));
                say(&format!("FAIL criterion 9 (Ada-feature ablation): error: {e}"));
                failures += 2;
            }
        }
    }
    if want("8") {
        if extended {
            report("8", "extended FMNIST", criterion_8(), &mut failures);
        } else {
            say("SKIP criterion 8 (extended FMNIST): multi-hour run; pass --ignored with COMMLEARN_DATA_DIR set");
        }
    }
    if failures > 0 {
        say(&format!("{failures} acceptance criteria failed"));
        std::process::exit(1);
    }
    say("all acceptance criteria passed");
}
