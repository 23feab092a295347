//! Monte Carlo ensemble of the controlled stochastic flow with its discrete
//! energy ledger.
//!
//! ```bash
//! cargo run --release --example simulate -- 128
//! ```

use slipctl::control::ControlPair;
use slipctl::dynamics::{forward_ensemble, sample_paths, Problem, ProblemSpec};
use slipctl::noise::NoiseSpec;
use slipctl::stats::mean_stderr;

fn main() -> slipctl::Result<()> {
    let m: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(128);
    let pb = Problem::build(&ProblemSpec::desk(), &NoiseSpec::multiplicative(2, 1e-2))?;
    let mesh = &pb.ops.mesh;
    let c = ControlPair::from_fn(&pb.time.times(), mesh, |t, i| {
        let s = mesh.nodes[i].s / mesh.perimeter * std::f64::consts::TAU;
        (0.4 * (2.0 * s).sin() * (1.0 + t), 0.3 * s.cos())
    });
    let y0: Vec<f64> = (0..pb.n()).map(|i| 0.3 / (1.0 + i as f64)).collect();
    let paths = sample_paths(1, pb.noise.m, &pb.time, m);
    let prep = pb.prepare(&c)?;
    let runs = forward_ensemble(&pb, &prep, &y0, &paths)?;

    let worst = runs
        .iter()
        .flat_map(|r| r.ledger.iter().map(|e| e.ledger_residual.abs()))
        .fold(0.0f64, f64::max);
    println!(
        "{m} samples, {} modes, {} steps, worst ledger residual {worst:.2e}",
        pb.n(),
        pb.time.steps
    );
    println!("{:>6} {:>14} {:>10}", "t", "E|u|^2", "stderr");
    for k in (0..pb.time.steps).step_by(pb.time.steps / 8) {
        let e: Vec<f64> = runs.iter().map(|r| r.ledger[k].energy).collect();
        let est = mean_stderr(&e);
        println!(
            "{:>6.3} {:>14.6e} {:>10.2e}",
            pb.time.time(k + 1),
            est.mean,
            est.stderr
        );
    }
    Ok(())
}
