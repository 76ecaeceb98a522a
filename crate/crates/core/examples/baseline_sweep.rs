//! Grid-search local SGD and SlowMo, then write curves.csv, metrics.json and
//! summary.txt for the winners into the given directory (default: a temp dir).

use std::sync::Arc;

use commlearn::bench::{emit_report, sweep, BenchReport, Family, SweepGrid};
use commlearn::data::{make_synthetic, SyntheticSpec};
use commlearn::local_sim::{RoundConfig, Task};
use commlearn::ArchSpec;

fn main() -> anyhow::Result<()> {
    let ds = make_synthetic(&SyntheticSpec {
        num_classes: 4,
        dims: 8,
        samples_per_class: 300,
        cluster_std: 1.0,
        seed: 2,
    })?;
    let task = Task::new("sweep", ArchSpec::mlp2(8, 4, 16), Arc::new(ds), RoundConfig::new(4, 4, 0.1, 32));
    let rounds = 60;
    let seeds = [0, 1];

    let mut entries = Vec::new();
    for family in [Family::LocalSgd, Family::SlowMo] {
        let mut grid = SweepGrid::standard(family);
        if family == Family::SlowMo {
            grid.alphas.truncate(3);
            grid.betas.truncate(3);
        }
        let result = sweep(&task, &grid, rounds, &seeds)?;
        let best = result.best_point();
        println!("{:?}: {} points, best {} (final {:.4})", family, result.points.len(), best.spec.describe(), best.score());
        let curves = best.spec.run_seeds(&task, rounds, &seeds)?;
        entries.push((best.spec.family(), best.spec.describe(), curves));
    }

    let report = BenchReport::build(&entries, &entries[0].0.clone(), None, rounds, String::new())?;
    let tmp;
    let out = match std::env::args().nth(1) {
        Some(dir) => std::path::PathBuf::from(dir),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    for path in emit_report(&report, &out)? {
        println!("wrote {}", path.display());
    }
    print!("{}", std::fs::read_to_string(out.join("summary.txt"))?);
    Ok(())
}
