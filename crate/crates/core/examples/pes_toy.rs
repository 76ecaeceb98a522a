//! PES gradient estimates on f(theta) = 0.5 |theta|^2, where the true
//! gradient is theta itself.

use commlearn::meta::{pes_gradient, PesPair, SegmentOutcome, Truncation, UnrollObjective};
use commlearn::RngStream;

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

fn main() -> anyhow::Result<()> {
    let theta: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
    let trunc = Truncation { min: 1, max: 1 };
    let root = RngStream::new(0);
    for n in [10, 100, 1000, 10_000] {
        let mut pairs = (0..n)
            .map(|s| PesPair::new(&HalfSquaredNorm, s, theta.len(), trunc, &root))
            .collect::<commlearn::Result<Vec<_>>>()?;
        let est = pes_gradient(&theta, &mut pairs, &HalfSquaredNorm, 0.01, 1, trunc, &root, 0)?;
        let g: Vec<String> = est.grad.iter().map(|g| format!("{g:+.3}")).collect();
        let se = est.stderr.iter().cloned().fold(0.0, f64::max);
        println!("{n:>6} pairs: [{}]  max stderr {se:.3}", g.join(", "));
    }
    println!("  true gradient: {theta:?}");
    Ok(())
}
