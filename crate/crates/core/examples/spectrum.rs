//! Slip-Stokes spectrum on the unit square and the discrete functional
//! inequality constants.
//!
//! ```bash
//! cargo run --release --example spectrum -- 32 0.0
//! ```

use std::time::Instant;

use slipctl::geometry::{build_geometry, DomainSpec};
use slipctl::operators::{assemble_operators, inequality_constants, stokes_eigenbasis};

fn main() -> slipctl::Result<()> {
    let mut args = std::env::args().skip(1);
    let nx: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(32);
    let alpha: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let t0 = Instant::now();
    let (grid, mesh) = build_geometry(&DomainSpec::unit(nx, nx))?;
    let ops = assemble_operators(&grid, &mesh, alpha, 0.1)?;
    let basis = stokes_eigenbasis(&ops, 12, &ops.alpha_nodes())?;
    println!(
        "nx = {nx}, alpha = {alpha}, eigensolve {:.2?}",
        t0.elapsed()
    );
    let pi2 = std::f64::consts::PI.powi(2);
    println!("{:>3} {:>14} {:>10}", "k", "lambda_k", "/pi^2");
    for (k, l) in basis.eigenvalues.iter().enumerate() {
        println!("{:>3} {:>14.8} {:>10.5}", k + 1, l, l / pi2);
    }
    let rep = inequality_constants(&basis, &ops);
    println!(
        "ladyzhenskaya {:.4}  trace {:.4}  korn {:.4}  c_hat {:.5}",
        rep.ladyzhenskaya, rep.trace, rep.korn, rep.c_hat
    );
    Ok(())
}
