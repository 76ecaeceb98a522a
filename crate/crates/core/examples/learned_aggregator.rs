//! LAgg-A sees every worker's delta instead of only their mean. A short
//! meta-training run with K = 8 workers, evaluated against local SGD.

use std::sync::Arc;

use commlearn::bench::{aggregate, fmt_metric, speedup, OptimizerSpec};
use commlearn::data::{make_synthetic, SyntheticSpec};
use commlearn::global_opt::Variant;
use commlearn::local_sim::{RoundConfig, Task};
use commlearn::meta::{meta_train_with, MetaConfig};
use commlearn::ArchSpec;

fn main() -> anyhow::Result<()> {
    let ds = make_synthetic(&SyntheticSpec {
        num_classes: 4,
        dims: 8,
        samples_per_class: 500,
        cluster_std: 0.6,
        seed: 7,
    })?;
    let gamma = 1.0;
    let task = Task::new("lagg", ArchSpec::mlp2(8, 4, 16), Arc::new(ds), RoundConfig::new(8, 4, gamma, 32));
    let cfg = MetaConfig {
        steps: 300,
        trunc_min: 30,
        trunc_max: 100,
        ..MetaConfig::default()
    };
    let res = meta_train_with(&cfg, vec![task.clone()], Variant::LaggA { workers: 8 }, 1, &mut |step, _, row| {
        if (step + 1) % 50 == 0 {
            println!("meta-step {:>4}  lr {:.1e}  meta-loss {:.4}", step + 1, row.lr, row.mean_meta_loss);
        }
        Ok(())
    })?;
    if let Some(path) = std::env::args().nth(1) {
        res.phi.save_json(&path)?;
        println!("saved {path}");
    }

    let seeds = [10, 11, 12];
    let local = aggregate(&OptimizerSpec::LocalSgd { gamma }.run_seeds(&task, 100, &seeds)?)?;
    let learned = OptimizerSpec::Learned {
        phi: Arc::new(res.phi),
        gamma,
    };
    let learned = aggregate(&learned.run_seeds(&task, 100, &seeds)?)?;
    println!("local SGD final {:.4}, LAgg-A final {:.4}", local.final_mean(), learned.final_mean());
    println!("speedup {}", fmt_metric(speedup(&local, &learned).map(|s| format!("{s:.2}"))));
    Ok(())
}
