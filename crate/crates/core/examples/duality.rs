//! Duality between the linearized state and the adjoint: pathwise for the
//! deterministic problem and in expectation with the regression adjoint.
//!
//! ```bash
//! cargo run --release --example duality -- 256
//! ```

use slipctl::adjoint::{duality_check, DualityMode, DualitySetup, RegressionSpec};
use slipctl::control::{ControlPair, Target};
use slipctl::dynamics::{sample_paths, Problem, ProblemSpec};
use slipctl::noise::NoiseSpec;

fn main() -> slipctl::Result<()> {
    let m: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(256);
    let spec = ProblemSpec::desk();
    for (mode, noise, samples) in [
        (DualityMode::PathwiseDet, NoiseSpec::zero(), 1),
        (
            DualityMode::Expectation,
            NoiseSpec::multiplicative(2, 1e-2),
            m,
        ),
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
        let target = Target::analytic(&pb, |t, x, y| [(3.0 * y).sin() * t, 0.2 * x]);
        let paths = sample_paths(5, pb.noise.m, &pb.time, samples);
        let setup = DualitySetup {
            problem: &pb,
            controls: &c,
            direction: &d,
            target: &target,
            y0: &y0,
            paths: &paths,
        };
        let r = duality_check(&setup, mode, &RegressionSpec::default())?;
        println!(
            "{mode:?}: lhs {:.8e}  adjoint side {:.8e}  defect {:.2e} +- {:.1e}  relative {:.2e}",
            r.lhs.mean, r.rhs.mean, r.defect.mean, r.defect.stderr, r.relative
        );
    }
    Ok(())
}
