//! The full desk-scale experiment: tune local SGD, meta-train LOpt-A and
//! LAgg-A, and report their speedups over 10 evaluation seeds. Takes
//! roughly half an hour on one core.

use commlearn::bench::{fmt_metric, rounds_to_loss};
use commlearn::desk::DeskSetup;
use commlearn::global_opt::Variant;

fn main() -> anyhow::Result<()> {
    let setup = DeskSetup::default();
    let reference = setup.tune_local_sgd()?;
    let target = reference.mean.min_mean();
    println!(
        "local SGD: gamma={} min loss {target:.5} at round {}",
        reference.gamma,
        fmt_metric(rounds_to_loss(&reference.mean.mean, target))
    );
    for variant in [Variant::LoptA, Variant::LaggA { workers: setup.workers }, Variant::LoptPlain] {
        let res = setup.meta_train(variant, reference.gamma, &mut |step, _, row| {
            if (step + 1) % 250 == 0 {
                eprintln!("{} meta-step {} meta-loss {:.4}", variant.name(), step + 1, row.mean_meta_loss);
            }
            Ok(())
        })?;
        let (s, curve) = setup.learned_speedup(&reference, &res.phi)?;
        println!(
            "{}: final loss {:.5}, reaches {target:.5} at round {}, speedup {}",
            variant.name(),
            curve.final_mean(),
            fmt_metric(rounds_to_loss(&curve.mean, target)),
            fmt_metric(s.map(|s| format!("{s:.2}")))
        );
    }
    Ok(())
}
