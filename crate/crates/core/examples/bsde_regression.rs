//! Regression adjoint for the stochastic problem: the cross-fitted
//! martingale residual falls as the ensemble grows.
//!
//! ```bash
//! cargo run --release --example bsde_regression
//! ```

use slipctl::adjoint::{adjoint_solve_regression, tracking_source, RegressionSpec};
use slipctl::control::{track_prep, ControlPair, Target};
use slipctl::dynamics::{forward_ensemble, sample_paths, Problem, ProblemSpec};
use slipctl::noise::NoiseSpec;

fn main() -> slipctl::Result<()> {
    let pb = Problem::build(&ProblemSpec::desk(), &NoiseSpec::multiplicative(2, 1e-2))?;
    let c = ControlPair::from_fn(&pb.time.times(), &pb.ops.mesh, |t, i| {
        (
            (i as f64 * 0.4 + t).sin() * 0.5,
            (i as f64 * 0.3).cos() * 0.3,
        )
    });
    let y0: Vec<f64> = (0..pb.n()).map(|i| 0.3 / (1.0 + i as f64)).collect();
    let target = Target::analytic(&pb, |t, x, y| [(3.0 * y).sin() * t, 0.2 * x]);
    let prep = pb.prepare(&c)?;
    let tp = track_prep(&pb, &prep, &target);
    for m in [64usize, 128, 256, 512] {
        let paths = sample_paths(13, pb.noise.m, &pb.time, m);
        let states = forward_ensemble(&pb, &prep, &y0, &paths)?;
        let srcs: Vec<_> = states
            .iter()
            .map(|s| tracking_source(&pb, &tp, s, None))
            .collect();
        let out = adjoint_solve_regression(&pb, &prep, &states, &srcs, &RegressionSpec::default())?;
        println!(
            "M = {m:>4}: mean squared martingale residual {:.4e}",
            out.mean_martingale()
        );
    }
    Ok(())
}
