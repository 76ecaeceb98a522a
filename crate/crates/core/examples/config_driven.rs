//! Build tasks and optimizers from a TOML run config, the same path the
//! `evaluate` subcommand takes.

use commlearn::bench::aggregate;
use commlearn::config::parse_run_config_str;

const CONFIG: &str = r#"
rounds = 40
num_seeds = 3

[task]
dataset = "synthetic"
arch = "mlp2"
width = 16
K = 4
H = 2
gamma = 0.3
b_loc = 32

[task.synthetic]
classes = 3
dims = 6

[[optimizers]]
kind = "local_sgd"

[[optimizers]]
kind = "slowmo"
alpha = 1.0
beta = 0.7

[[optimizers]]
kind = "adam"
lr = 0.01
"#;

fn main() -> anyhow::Result<()> {
    let cfg = parse_run_config_str(CONFIG)?;
    let task = cfg.task.build("config", None)?;
    let seeds = cfg.seed_list(0);
    let base = std::env::current_dir()?;
    for opt in &cfg.optimizers {
        let spec = opt.resolve(&cfg.task, &base)?;
        let curve = aggregate(&spec.run_seeds(&task, cfg.rounds, &seeds)?)?;
        println!("{:<12} {:<32} final {:.4}", opt.label(), spec.describe(), curve.final_mean());
    }
    Ok(())
}
