//! Tuned baselines on Fashion-MNIST (mlp2, K=8, H=4). Needs the four IDX
//! files in the directory given as the first argument or in
//! COMMLEARN_DATA_DIR. The second argument sets the round count (default 100).

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use commlearn::bench::{aggregate, tuned_baselines};
use commlearn::data::{load_fmnist, resolve_data_dir};
use commlearn::local_sim::{RoundConfig, Task};
use commlearn::ArchSpec;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let flag = args.next().map(PathBuf::from);
    let dir = resolve_data_dir(flag.as_deref()).context("pass the FMNIST directory or set COMMLEARN_DATA_DIR")?;
    let rounds: usize = args.next().map(|r| r.parse()).transpose()?.unwrap_or(100);
    let ds = load_fmnist(&dir)?;
    let tuned = tuned_baselines("fmnist-mlp2-k8-h4").context("tuned baselines missing")?;
    let input = ds.sample_size();
    let task = Task::new(
        "fmnist",
        ArchSpec::mlp2(input, 10, 128),
        Arc::new(ds),
        RoundConfig::new(8, 4, tuned.local_gamma, 128),
    );
    for spec in tuned.specs() {
        let curve = aggregate(&spec.run_seeds(&task, rounds, &[0, 1, 2])?)?;
        println!("{:<40} final {:.4}  min {:.4}", spec.describe(), curve.final_mean(), curve.min_mean());
    }
    Ok(())
}
