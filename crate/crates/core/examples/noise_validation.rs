//! Sampled checks of the noise bounds: Lipschitz and growth constants,
//! Frechet remainder order and the Jacobian adjoint identity.
//!
//! ```bash
//! cargo run --release --example noise_validation
//! ```

use slipctl::dynamics::{Problem, ProblemSpec};
use slipctl::noise::{validate_assumptions, NoiseSpec};

fn main() -> slipctl::Result<()> {
    for l in [1e-3, 1e-2, 1e-1] {
        let pb = Problem::build(&ProblemSpec::desk(), &NoiseSpec::multiplicative(2, l))?;
        let r = validate_assumptions(&pb.noise, &pb.basis, 500, 11)?;
        println!(
            "L = {l:.0e}: L_est {:.3e}  K_est {:.3e}  |J|_H {:.3e}  |J|_V {:.3e}  remainder slope {:.2}  adjoint defect {:.1e}",
            r.l_est, r.k_est, r.jacobian_bound_h, r.jacobian_bound_v, r.frechet_remainder_slope, r.adjoint_defect
        );
    }
    Ok(())
}
