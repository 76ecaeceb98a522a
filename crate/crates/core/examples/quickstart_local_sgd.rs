//! Local SGD on a synthetic task: K workers, H local steps per round.

use std::sync::Arc;

use commlearn::bench::{aggregate, OptimizerSpec};
use commlearn::data::{make_synthetic, SyntheticSpec};
use commlearn::local_sim::{RoundConfig, Task};
use commlearn::ArchSpec;

fn main() -> anyhow::Result<()> {
    let ds = make_synthetic(&SyntheticSpec {
        num_classes: 4,
        dims: 8,
        samples_per_class: 500,
        cluster_std: 0.6,
        seed: 7,
    })?;
    let task = Task::new("quickstart", ArchSpec::mlp2(8, 4, 16), Arc::new(ds), RoundConfig::new(4, 4, 0.5, 64));

    let curves = OptimizerSpec::LocalSgd { gamma: 0.5 }.run_seeds(&task, 100, &[0, 1, 2])?;
    let mean = aggregate(&curves)?;
    for t in [1, 10, 25, 50, 100] {
        println!("round {t:>3}: loss {:.4} +- {:.4}", mean.mean[t - 1], mean.stderr[t - 1]);
    }
    Ok(())
}
