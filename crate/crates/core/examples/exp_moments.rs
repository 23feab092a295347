//! Stability weights and exponential moments from a simulated ensemble,
//! together with the constants ledger.
//!
//! ```bash
//! cargo run --release --example exp_moments
//! ```

use slipctl::cli::estimate_fits;
use slipctl::control::{constants_report, AdmissibleSet, ControlPair};
use slipctl::dynamics::{
    exp_integrability_stats, forward_ensemble, sample_paths, weight_path, MomentConstants, Problem,
    ProblemSpec, WeightConstants, WeightKind,
};
use slipctl::noise::NoiseSpec;
use slipctl::stats::mean_stderr;

fn main() -> slipctl::Result<()> {
    let pb = Problem::build(&ProblemSpec::desk(), &NoiseSpec::multiplicative(2, 1e-2))?;
    let bound = 0.02;
    let c = ControlPair::from_fn(&pb.time.times(), &pb.ops.mesh, |t, i| {
        (
            (i as f64 * 0.4 + t).sin() * 0.01,
            (i as f64 * 0.3).cos() * 0.01,
        )
    });
    let y0: Vec<f64> = (0..pb.n()).map(|i| 0.3 / (1.0 + i as f64)).collect();
    let paths = sample_paths(17, pb.noise.m, &pb.time, 256);
    let runs = forward_ensemble(&pb, &pb.prepare(&c)?, &y0, &paths)?;
    let fits = estimate_fits(&pb, &c, &runs);
    let ledger = constants_report(&pb, &fits, &AdmissibleSet::new(bound)?, pb.noise.budget())?;
    println!("{}", serde_json::to_string_pretty(&ledger)?);

    let k = WeightConstants {
        c0: fits.c0,
        c1: fits.c1,
        c2: fits.c2,
        nu: pb.nu(),
    };
    for kind in [
        WeightKind::Xi0,
        WeightKind::Xi1,
        WeightKind::Xi2,
        WeightKind::Beta,
    ] {
        let end: Vec<f64> = runs
            .iter()
            .map(|r| {
                *weight_path(kind, &k, &pb, r, &c, None)
                    .values
                    .last()
                    .unwrap()
            })
            .collect();
        let e = mean_stderr(&end);
        println!("{kind:?}(T): {:.6} +- {:.1e}", e.mean, e.stderr);
    }
    let mk = MomentConstants {
        nu: pb.nu(),
        l_bound: pb.noise.l_bound,
        r_star: ledger.r_star,
        c_hat: fits.c_hat,
        t_end: pb.time.t_end,
    };
    for s in exp_integrability_stats(&pb, &runs, &mk)?.stats {
        println!(
            "{}: E exp = {:.6} +- {:.1e}, max exponent {:.3e}, heavy tail {}",
            s.name, s.mean, s.stderr, s.max_exponent, s.heavy_tail
        );
    }
    Ok(())
}
