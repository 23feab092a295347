//! Boundary lifting of random compatible control pairs.
//!
//! ```bash
//! cargo run --release --example lifting -- 32
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slipctl::geometry::{build_geometry, enforce_compatibility, DomainSpec};
use slipctl::operators::assemble_operators;
use slipctl::operators::lifting::solve_lifting;

fn main() -> slipctl::Result<()> {
    let nx: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(32);
    let (grid, mesh) = build_geometry(&DomainSpec::unit(nx, nx))?;
    let ops = assemble_operators(&grid, &mesh, 0.5, 0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    println!(
        "{:>4} {:>11} {:>11} {:>11} {:>11} {:>8}",
        "pair", "interior", "normal", "slip", "div", "C_est"
    );
    for i in 0..5 {
        let a: Vec<f64> = (0..mesh.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // the normal flux must integrate to zero around the boundary
        let a = enforce_compatibility(&a, &mesh)?;
        let b: Vec<f64> = (0..mesh.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = solve_lifting(&a, &b, &ops)?;
        println!(
            "{i:>4} {:>11.2e} {:>11.2e} {:>11.2e} {:>11.2e} {:>8.3}",
            l.interior_residual, l.normal_mismatch, l.slip_mismatch, l.divergence, l.c_est
        );
    }
    Ok(())
}
