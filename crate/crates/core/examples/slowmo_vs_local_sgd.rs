//! SlowMo against plain averaging on the same task and seeds.

use std::sync::Arc;

use commlearn::bench::{aggregate, fmt_metric, speedup, OptimizerSpec};
use commlearn::data::{make_synthetic, SyntheticSpec};
use commlearn::local_sim::{RoundConfig, Task};
use commlearn::ArchSpec;

fn main() -> anyhow::Result<()> {
    let ds = make_synthetic(&SyntheticSpec {
        num_classes: 4,
        dims: 8,
        samples_per_class: 500,
        cluster_std: 1.0,
        seed: 3,
    })?;
    let gamma = 0.1;
    let task = Task::new("slowmo", ArchSpec::mlp2(8, 4, 16), Arc::new(ds), RoundConfig::new(4, 8, gamma, 32));
    let seeds = [0, 1, 2, 3];

    let local = aggregate(&OptimizerSpec::LocalSgd { gamma }.run_seeds(&task, 150, &seeds)?)?;
    println!("local SGD      final {:.4}  min {:.4}", local.final_mean(), local.min_mean());
    for (alpha, beta) in [(1.0, 0.5), (1.0, 0.8), (2.0, 0.6)] {
        let spec = OptimizerSpec::SlowMo { gamma, alpha, beta };
        let curve = aggregate(&spec.run_seeds(&task, 150, &seeds)?)?;
        println!(
            "{:<14} final {:.4}  min {:.4}  speedup {}",
            format!("a={alpha} b={beta}"),
            curve.final_mean(),
            curve.min_mean(),
            fmt_metric(speedup(&local, &curve).map(|s| format!("{s:.2}")))
        );
    }
    Ok(())
}
