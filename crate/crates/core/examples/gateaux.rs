//! Gateaux differentiability of the control-to-state map: the remainder of
//! the linearization shrinks like eps^2.
//!
//! ```bash
//! cargo run --release --example gateaux
//! ```

use slipctl::control::ControlPair;
use slipctl::dynamics::{gateaux_check, sample_paths, Problem, ProblemSpec};
use slipctl::noise::NoiseSpec;
use slipctl::stats::loglog_slope;

fn main() -> slipctl::Result<()> {
    let spec = ProblemSpec::desk();
    let eps = [1e-1, 3e-2, 1e-2, 3e-3];
    for (label, noise, m) in [
        ("deterministic", NoiseSpec::zero(), 1),
        ("stochastic", NoiseSpec::multiplicative(2, 1e-2), 64),
    ] {
        let pb = Problem::build(&spec, &noise)?;
        let times = pb.time.times();
        let mesh = &pb.ops.mesh;
        let c = ControlPair::from_fn(&times, mesh, |t, i| {
            (
                (i as f64 * 0.4 + t).sin() * 0.5,
                (i as f64 * 0.3).cos() * 0.3,
            )
        });
        let d = ControlPair::from_fn(&times, mesh, |t, i| {
            ((i as f64 * 0.9 - t).cos(), (i as f64 * 0.7 + 2.0 * t).sin())
        });
        let y0: Vec<f64> = (0..pb.n()).map(|i| 0.3 / (1.0 + i as f64)).collect();
        let paths = sample_paths(3, pb.noise.m, &pb.time, m);
        let rows = gateaux_check(&pb, &c, &d, &eps, &y0, &paths)?;
        println!("{label} ({m} paths)");
        for r in &rows {
            println!(
                "  eps {:>7.0e}  L2 {:.3e} +- {:.1e}  V {:.3e}",
                r.eps, r.l2.mean, r.l2.stderr, r.v.mean
            );
        }
        let v: Vec<f64> = rows.iter().map(|r| r.l2.mean).collect();
        println!("  log-log slope {:.3}", loglog_slope(&eps, &v));
    }
    Ok(())
}
