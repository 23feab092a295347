//! Adjoint gradient of the reduced cost against central finite differences.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use slipctl::adjoint::{fd_directional, DualitySetup};
use slipctl::control::{
    assemble_gradient, evaluate, ControlPair, CostWeights, GradientMode, Target,
};
use slipctl::dynamics::{sample_paths, Problem, ProblemSpec};
use slipctl::noise::NoiseSpec;

fn main() -> slipctl::Result<()> {
    let pb = Problem::build(&ProblemSpec::desk(), &NoiseSpec::zero())?;
    let times = pb.time.times();
    let mesh = &pb.ops.mesh;
    let c = ControlPair::from_fn(&times, mesh, |t, i| {
        (
            (i as f64 * 0.4 + t).sin() * 0.5,
            (i as f64 * 0.3).cos() * 0.3,
        )
    });
    let y0: Vec<f64> = (0..pb.n()).map(|i| 0.3 / (1.0 + i as f64)).collect();
    let target = Target::analytic(&pb, |t, x, y| [(3.0 * y).sin() * t, 0.2 * x]);
    let paths = sample_paths(0, 0, &pb.time, 1);
    let w = CostWeights {
        lambda1: 1e-2,
        lambda2: 1e-2,
    };
    let ev = evaluate(&pb, &c, &target, &y0, &paths, &w)?;
    let g = assemble_gradient(&pb, &c, &ev, &target, &w, &GradientMode::Pathwise)?;
    println!("J = {:.10e}", ev.cost.total.mean);
    for (j, freq) in [1.0, 2.0, 5.0].iter().enumerate() {
        let d = ControlPair::from_fn(&times, mesh, |t, i| {
            (
                (freq * i as f64 * 0.2 - t).cos(),
                (freq * i as f64 * 0.1 + t).sin(),
            )
        });
        let setup = DualitySetup {
            problem: &pb,
            controls: &c,
            direction: &d,
            target: &target,
            y0: &y0,
            paths: &paths,
        };
        for eps in [1e-3, 1e-4, 1e-5] {
            let (fd, an) = fd_directional(&setup, &g.as_pair(), &w, eps)?;
            println!(
                "dir {j} eps {eps:.0e}: fd {fd:+.10e}  adjoint {an:+.10e}  rel {:.2e}",
                (fd - an).abs() / an.abs()
            );
        }
    }
    Ok(())
}
