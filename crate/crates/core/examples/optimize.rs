//! Projected gradient descent recovering a known boundary control from the
//! states it generates.
//!
//! ```bash
//! cargo run --release --example optimize -- 64
//! ```

use slipctl::control::{
    evaluate, optimize_pgd, AdmissibleSet, ControlPair, CostWeights, PgdOptions, PgdProblem, Target,
};
use slipctl::dynamics::{forward_ensemble, sample_paths, Problem, ProblemSpec};
use slipctl::noise::NoiseSpec;

fn main() -> slipctl::Result<()> {
    let m: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(64);
    let pb = Problem::build(&ProblemSpec::desk(), &NoiseSpec::multiplicative(2, 1e-2))?;
    let mesh = &pb.ops.mesh;
    let times = pb.time.times();
    let star = ControlPair::from_fn(&times, mesh, |t, i| {
        let s = mesh.nodes[i].s / mesh.perimeter * std::f64::consts::TAU;
        (0.6 * (2.0 * s).sin() * (1.0 + t), 0.4 * s.cos())
    });
    let y0: Vec<f64> = (0..pb.n()).map(|i| 0.3 / (1.0 + i as f64)).collect();
    let paths = sample_paths(21, pb.noise.m, &pb.time, m);
    let prep = pb.prepare(&star)?;
    let runs = forward_ensemble(&pb, &prep, &y0, &paths)?;
    let target = Target::recorded(&prep, &runs);
    let w = CostWeights {
        lambda1: 1e-4,
        lambda2: 1e-4,
    };
    let zero = ControlPair::zeros(times.len(), mesh.len());
    let j0 = evaluate(&pb, &zero, &target, &y0, &paths, &w)?
        .cost
        .total
        .mean;
    let js = evaluate(&pb, &star, &target, &y0, &paths, &w)?
        .cost
        .total
        .mean;
    let ctx = PgdProblem {
        problem: &pb,
        target: &target,
        y0: &y0,
        paths: &paths,
        weights: w,
        set: AdmissibleSet::new(1.0)?,
    };
    let res = optimize_pgd(&ctx, &zero, &PgdOptions::default())?;
    print!("{}", res.trace.to_csv());
    let jf = res.cost.total.mean;
    println!("stop: {}", res.trace.stop_reason);
    println!(
        "J(0) {j0:.4e}  J(star) {js:.4e}  J(final) {jf:.4e}  recovered {:.1}%",
        100.0 * (j0 - jf) / (j0 - js)
    );
    Ok(())
}
