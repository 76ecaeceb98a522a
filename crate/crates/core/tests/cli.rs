use std::path::Path;
use std::process::Command;

const TASK: &str = r#"
[task]
dataset = "synthetic"
arch = "mlp2"
width = 6
K = 2
H = 2
gamma = 0.3
b_loc = 8

[task.synthetic]
classes = 3
dims = 4
samples_per_class = 20
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_commlearn"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> std::process::Output {
    bin().args(args).output().unwrap()
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"));
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bad_config_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &TASK.replace("K = 2\n", ""));
    let out = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`K`"));
}

#[test]
fn evaluate_writes_reproducible_report() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "rounds = 12\nnum_seeds = 3\n{TASK}\n[[optimizers]]\nkind = \"local_sgd\"\n\n[[optimizers]]\nkind = \"slowmo\"\nalpha = 1.0\nbeta = 0.5\n\n[[optimizers]]\nkind = \"adam\"\nlr = 0.01\n"
    );
    let cfg = write_config(dir.path(), "run.toml", &body);
    let before = std::fs::read(&cfg).unwrap();
    let outs: Vec<_> = [("a", "1"), ("b", "3")]
        .iter()
        .map(|(name, jobs)| {
            let o = dir.path().join(name);
            let res = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap(), "--jobs", jobs]);
            assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
            o
        })
        .collect();
    assert_eq!(std::fs::read(&cfg).unwrap(), before);
    for f in ["curves.csv", "metrics.json", "summary.txt", "runs.json", "config.toml"] {
        assert_eq!(std::fs::read(outs[0].join(f)).unwrap(), std::fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(outs[0].join("curves.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("round,optimizer,loss_mean,loss_stderr"));
    assert_eq!(lines.count(), 3 * 12);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(outs[0].join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["reference"], "local_sgd");
    assert_eq!(metrics["metrics"][0]["speedup"], 1.0);
    assert!(metrics["config"].as_str().unwrap().contains("rounds = 12"));

    // report merges runs files into the same metrics
    let merged = dir.path().join("merged");
    let res = run(&[
        "report",
        "--runs",
        outs[0].join("runs.json").to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(
        std::fs::read(merged.join("curves.csv")).unwrap(),
        std::fs::read(outs[0].join("curves.csv")).unwrap()
    );
}

#[test]
fn meta_train_checkpoints_and_learned_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let meta = format!(
        "variant = \"lagg_a\"\nseed = 1\n{TASK}\n[meta]\nsteps = 6\nwarmup = 2\ncheckpoint_every = 3\ntask_batch = 2\npes_pairs = 1\ntrunc_min = 4\ntrunc_max = 8\nsegment_len = 2\n"
    );
    let cfg = write_config(dir.path(), "meta.toml", &meta);
    let out = dir.path().join("meta_out");
    let res = run(&["meta-train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("checkpoints/phi_step3.json").is_file());
    assert!(out.join("checkpoints/phi_step6.json").is_file());
    assert!(!out.join("checkpoints/phi_step4.json").exists());
    let log = std::fs::read_to_string(out.join("meta_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
    assert!(log.starts_with("meta_step,lr,mean_meta_loss,num_diverged"));

    let run_cfg = format!(
        "rounds = 5\nnum_seeds = 2\n{TASK}\n[[optimizers]]\nkind = \"local_sgd\"\n\n[[optimizers]]\nkind = \"learned\"\ncheckpoint = \"meta_out/phi_final.json\"\n"
    );
    let cfg = write_config(dir.path(), "run.toml", &run_cfg);
    let res = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("eval").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));

    // an aggregator checkpoint tied to K=2 is rejected for a K=3 task
    let wrong = run_cfg.replace("K = 2", "K = 3");
    let cfg = write_config(dir.path(), "wrong.toml", &wrong);
    let res = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("bad").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("K=2"));
}

#[test]
fn sweep_picks_a_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("rounds = 8\n{TASK}\n[sweep]\nfamily = \"local_sgd\"\ngammas = [0.5, 0.1]\nnum_seeds = 2\n");
    let cfg = write_config(dir.path(), "sweep.toml", &body);
    let out = dir.path().join("s");
    let res = run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(String::from_utf8_lossy(&res.stdout).starts_with("best: local_sgd gamma="));
}

#[test]
fn missing_data_dir_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let body = "rounds = 2\n[task]\ndataset = \"fmnist\"\narch = \"mlp2\"\nK = 2\nH = 2\ngamma = 0.1\n[[optimizers]]\nkind = \"local_sgd\"\n";
    let cfg = write_config(dir.path(), "run.toml", body);
    let res = bin()
        .env_remove("COMMLEARN_DATA_DIR")
        .args(["evaluate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    let empty = tempfile::tempdir().unwrap();
    let res = bin()
        .env("COMMLEARN_DATA_DIR", empty.path())
        .args(["evaluate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("train-images"));
}
