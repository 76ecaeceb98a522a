//! Inspect the Ada feature matrix a learned optimizer sees after a few
//! rounds of aggregated updates.

use std::sync::Arc;

use commlearn::data::{make_synthetic, SyntheticSpec};
use commlearn::features::{compute_features, init_state, normalize_features, DecayCoeffs};
use commlearn::local_sim::{local_round, RoundConfig, StreamAssignment, Task};
use commlearn::rng::purpose;
use commlearn::{ArchSpec, RngStream};

fn main() -> anyhow::Result<()> {
    let ds = make_synthetic(&SyntheticSpec {
        num_classes: 4,
        dims: 8,
        samples_per_class: 200,
        cluster_std: 1.0,
        seed: 1,
    })?;
    let task = Task::new("features", ArchSpec::mlp2(ds.sample_size(), 4, 16), Arc::new(ds), RoundConfig::new(4, 4, 0.3, 32));
    let mut w = task.init_weights(0)?;
    let mut state = init_state(&w);
    let betas = DecayCoeffs::default();
    let root = RngStream::new(0);
    let mut features = None;
    for t in 0..5u64 {
        let deltas = local_round(&task, &w, &task.round, &root.path(&[purpose::LOCAL, t]), StreamAssignment::PerWorker)?;
        let mean = &deltas.average;
        state.update(mean, &betas)?;
        features = Some(compute_features(&w, &state, mean)?);
        w = w.sub(mean)?;
    }
    let raw = features.expect("ran at least one round");
    let rms = |c: Vec<f64>| (c.iter().map(|x| x * x).sum::<f64>() / c.len() as f64).sqrt();
    println!("{} feature columns; raw rms of the first six per tensor:", raw.ncols());
    for (i, t) in raw.tensors.iter().enumerate() {
        let shown: Vec<String> = (0..6).map(|j| format!("{:.1e}", rms(t.column(j)))).collect();
        println!("  tensor {i} ({:>3} rows): {}", t.num_rows(), shown.join(" "));
    }
    // normalized columns have unit rms (up to eps); timestep columns are left alone
    let f = normalize_features(raw);
    let t = &f.tensors[0];
    let unit: Vec<String> = (0..f.ncols()).map(|j| format!("{:.2}", rms(t.column(j)))).collect();
    println!("tensor 0 after normalization: {}", unit.join(" "));
    Ok(())
}
