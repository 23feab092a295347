use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slipctl::adjoint::{
    adjoint_solve_deterministic, adjoint_solve_pathwise, adjoint_solve_regression, boundary_terms,
    recover_pressure, tracking_source, transpose_identity, RegressionSpec,
};
use slipctl::control::{track_prep, ControlPair, Target};
use slipctl::dynamics::{
    direction_forcing, forward_ensemble, forward_solve, linearized_solve, sample_paths, Problem,
    ProblemSpec,
};
use slipctl::geometry::DomainSpec;
use slipctl::noise::NoiseSpec;
use slipctl::operators::spmv;

fn spec(convection: bool) -> ProblemSpec {
    ProblemSpec {
        domain: DomainSpec::unit(8, 8),
        modes: 6,
        steps: 16,
        convection,
        ..ProblemSpec::desk()
    }
}

fn controls(pb: &Problem, amp: f64, phase: f64) -> ControlPair {
    let mesh = &pb.ops.mesh;
    ControlPair::from_fn(&pb.time.times(), mesh, |t, i| {
        (
            amp * (i as f64 * 0.5 + t + phase).sin(),
            amp * (i as f64 * 0.3 - phase).cos(),
        )
    })
}

fn y0(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.4 / (1.0 + i as f64)).collect()
}

fn random_source(pb: &Problem, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..=pb.time.steps)
        .map(|_| (0..pb.n()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn zero_source_gives_zero_adjoint() {
    let pb = Problem::build(&spec(true), &NoiseSpec::multiplicative(2, 1e-2)).unwrap();
    let c = controls(&pb, 0.3, 0.0);
    let prep = pb.prepare(&c).unwrap();
    let path = &sample_paths(1, 2, &pb.time, 1)[0];
    let st = forward_solve(&pb, &prep, &y0(pb.n()), path).unwrap();
    let src = vec![vec![0.0; pb.n()]; pb.time.steps + 1];
    let adj = adjoint_solve_pathwise(&pb, &prep, &st, &src).unwrap();
    assert!(adj.p.iter().flatten().all(|v| *v == 0.0));
    assert!(adj.psi0.iter().all(|v| *v == 0.0));
}

#[test]
fn adjoint_is_linear_in_the_source() {
    let pb = Problem::build(&spec(true), &NoiseSpec::multiplicative(2, 1e-2)).unwrap();
    let c = controls(&pb, 0.3, 0.2);
    let prep = pb.prepare(&c).unwrap();
    let path = &sample_paths(2, 2, &pb.time, 1)[0];
    let st = forward_solve(&pb, &prep, &y0(pb.n()), path).unwrap();
    let (u, w) = (random_source(&pb, 3), random_source(&pb, 4));
    let mix: Vec<Vec<f64>> = u
        .iter()
        .zip(&w)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| 2.5 * x - y).collect())
        .collect();
    let pu = adjoint_solve_pathwise(&pb, &prep, &st, &u).unwrap();
    let pw = adjoint_solve_pathwise(&pb, &prep, &st, &w).unwrap();
    let pm = adjoint_solve_pathwise(&pb, &prep, &st, &mix).unwrap();
    for k in 0..=pb.time.steps {
        let lin: Vec<f64> = pu.p[k]
            .iter()
            .zip(&pw.p[k])
            .map(|(a, b)| 2.5 * a - b)
            .collect();
        assert!(
            max_diff(&lin, &pm.p[k])
                <= 1e-12 * (1.0 + lin.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        );
    }
}

/// Builds every one-step map of the linearized scheme as a dense matrix and
/// runs the adjoint recursion with explicit transposes.
fn dense_oracle(convection: bool, noise: NoiseSpec) {
    let pb = Problem::build(&spec(convection), &noise).unwrap();
    let n = pb.n();
    let dt = pb.time.dt;
    let c = controls(&pb, 0.4, 0.7);
    let d = controls(&pb, 1.0, 1.9);
    let prep = pb.prepare(&c).unwrap();
    let dir = pb.prepare_direction(&prep, &d).unwrap();
    let path = &sample_paths(5, pb.noise.m, &pb.time, 1)[0];
    let st = forward_solve(&pb, &prep, &y0(n), path).unwrap();
    let lin = linearized_solve(&pb, &prep, &st, &dir).unwrap();
    let nt = pb.time.steps;
    let mut m = vec![];
    let mut b = vec![];
    for k in 0..nt {
        let mk = pb.step_matrix(&st.coeffs[k], &prep.ca[k]);
        let c1 = DVector::from_column_slice(&st.coeffs[k + 1]);
        let mut bk = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            let mut col = &pb.tensor[i] * &c1 + prep.wv[k].column(i);
            col *= -dt;
            if !pb.noise.is_zero() {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                let j = pb
                    .noise
                    .jac_sum(&st.projected(&prep, k), &e, &path.increments[k]);
                col += DVector::from_vec(j);
            }
            let mut target = bk.column_mut(i);
            target += col;
        }
        m.push(mk);
        b.push(bk);
    }
    // forward: the dense maps reproduce the linearized run
    let mut z = DVector::from_column_slice(&lin.coeffs[0]);
    for k in 0..nt {
        let h = DVector::from_vec(direction_forcing(&pb, &prep, &dir, &st, k));
        z = m[k].clone().lu().solve(&(&b[k] * &z + h)).unwrap();
        let scale = 1.0 + z.amax();
        assert!(
            max_diff(z.as_slice(), &lin.coeffs[k + 1]) <= 1e-11 * scale,
            "forward step {k}"
        );
    }
    // backward with explicit transposes
    let src = random_source(&pb, 6);
    let adj = adjoint_solve_pathwise(&pb, &prep, &st, &src).unwrap();
    let mut p = DVector::zeros(n);
    for k in (0..nt).rev() {
        let psi = &p + DVector::from_column_slice(&src[k + 1]);
        let mu = m[k].transpose().lu().solve(&psi).unwrap();
        let scale = 1.0 + mu.amax();
        assert!(
            max_diff(mu.as_slice(), &adj.mu[k + 1]) <= 1e-11 * scale,
            "mu at {}",
            k + 1
        );
        p = b[k].transpose() * mu;
        assert!(
            max_diff(p.as_slice(), &adj.p[k]) <= 1e-11 * (1.0 + p.amax()),
            "p at {k}"
        );
    }
    let psi0 = p + DVector::from_column_slice(&src[0]);
    assert!(max_diff(psi0.as_slice(), &adj.psi0) <= 1e-11 * (1.0 + psi0.amax()));
    let (lhs, rhs) = transpose_identity(&pb, &prep, &dir, &st, &lin, &adj, &src);
    assert!(
        (lhs - rhs).abs() <= 1e-11 * lhs.abs().max(1.0),
        "{lhs} vs {rhs}"
    );
}

#[test]
fn dense_oracle_nonlinear_noisy() {
    dense_oracle(true, NoiseSpec::multiplicative(2, 1e-2));
}

#[test]
fn dense_oracle_stokes_deterministic() {
    dense_oracle(false, NoiseSpec::zero());
}

#[test]
fn stokes_adjoint_is_the_transposed_implicit_step() {
    let pb = Problem::build(&spec(false), &NoiseSpec::zero()).unwrap();
    let prep = pb.prepare(&controls(&pb, 0.2, 0.0)).unwrap();
    let st = forward_solve(&pb, &prep, &y0(pb.n()), &sample_paths(0, 0, &pb.time, 1)[0]).unwrap();
    let src = random_source(&pb, 8);
    let adj = adjoint_solve_deterministic(&pb, &prep, &st, &src).unwrap();
    // without convection the step matrix is I + dt nu Lambda on the eigenbasis
    let nt = pb.time.steps;
    let mut p = vec![0.0; pb.n()];
    for k in (0..nt).rev() {
        p = (0..pb.n())
            .map(|i| {
                (p[i] + src[k + 1][i]) / (1.0 + pb.time.dt * pb.nu() * pb.basis.eigenvalues[i])
            })
            .collect();
        assert!(max_diff(&p, &adj.p[k]) <= 1e-13, "step {k}");
    }
}

#[test]
fn deterministic_solver_rejects_noise() {
    let pb = Problem::build(&spec(false), &NoiseSpec::multiplicative(2, 1e-2)).unwrap();
    let prep = pb.prepare(&controls(&pb, 0.2, 0.0)).unwrap();
    let st = forward_solve(&pb, &prep, &y0(pb.n()), &sample_paths(0, 2, &pb.time, 1)[0]).unwrap();
    let src = random_source(&pb, 9);
    assert!(adjoint_solve_deterministic(&pb, &prep, &st, &src).is_err());
}

#[test]
fn zero_noise_regression_matches_the_sweep() {
    let pb = Problem::build(&spec(true), &NoiseSpec::zero()).unwrap();
    let c = controls(&pb, 0.3, 0.4);
    let prep = pb.prepare(&c).unwrap();
    let target = Target::analytic(&pb, |t, x, _| [t * x, 0.1]);
    let tp = track_prep(&pb, &prep, &target);
    let paths = sample_paths(10, 0, &pb.time, 64);
    let st = forward_ensemble(&pb, &prep, &y0(pb.n()), &paths).unwrap();
    let srcs: Vec<_> = st
        .iter()
        .map(|s| tracking_source(&pb, &tp, s, None))
        .collect();
    let reg = adjoint_solve_regression(&pb, &prep, &st, &srcs, &RegressionSpec::default()).unwrap();
    let exact = adjoint_solve_deterministic(&pb, &prep, &st[0], &srcs[0]).unwrap();
    for k in 0..=pb.time.steps {
        assert!(max_diff(&reg.pairs[3].p[k], &exact.p[k]) <= 1e-8);
    }
    assert!(reg.mean_martingale() <= 1e-20);
}

#[test]
fn regression_rejects_small_ensembles() {
    let pb = Problem::build(&spec(true), &NoiseSpec::multiplicative(2, 1e-2)).unwrap();
    let prep = pb.prepare(&controls(&pb, 0.3, 0.4)).unwrap();
    let st = forward_ensemble(&pb, &prep, &y0(pb.n()), &sample_paths(11, 2, &pb.time, 8)).unwrap();
    let srcs: Vec<_> = (0..8).map(|s| random_source(&pb, s)).collect();
    assert!(adjoint_solve_regression(&pb, &prep, &st, &srcs, &RegressionSpec::default()).is_err());
}

#[test]
fn pressure_of_a_gradient_field() {
    let pb = Problem::build(&spec(false), &NoiseSpec::zero()).unwrap();
    let g = &pb.ops.grid;
    let pi0: Vec<f64> = (0..g.n_cells())
        .map(|c| {
            let (i, j) = (c % g.nx, c / g.nx);
            let (x, y) = ((i as f64 + 0.5) * g.hx, (j as f64 + 0.5) * g.hy);
            (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).cos() + 0.3 * x
        })
        .collect();
    let mean = pi0.iter().sum::<f64>() / pi0.len() as f64;
    let u = spmv(&pb.ops.grad, &pi0);
    let nf = pb.ops.n_faces();
    let rec = recover_pressure(&pb, &vec![0.0; nf], &vec![0.0; nf], &u).unwrap();
    assert!(rec.divergence <= 1e-10, "{}", rec.divergence);
    for (a, b) in rec.pi.iter().zip(&pi0) {
        assert!((a - (b - mean)).abs() <= 1e-10, "{a} vs {}", b - mean);
    }
}

#[test]
fn recovered_pressure_leaves_a_solenoidal_remainder() {
    let pb = Problem::build(&spec(true), &NoiseSpec::zero()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c: Vec<f64> = (0..pb.n()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d: Vec<f64> = (0..pb.n()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let u: Vec<f64> = pb.ops.grid.sample(|x, y| [x * y, (3.0 * x).sin()]);
    let rec = recover_pressure(&pb, &pb.field(&c), &pb.field(&d), &u).unwrap();
    assert!(rec.divergence <= 1e-10, "{}", rec.divergence);
}

#[test]
fn boundary_trace_of_a_mode() {
    let pb = Problem::build(&spec(false), &NoiseSpec::zero()).unwrap();
    let mut e = vec![0.0; pb.n()];
    e[0] = 1.0;
    let f = pb.field(&e);
    let bt = boundary_terms(&pb, &f, &vec![0.0; pb.ops.grid.n_cells()]).unwrap();
    let expect = pb.trace_e.column(0);
    for (i, v) in bt.p_tau.iter().enumerate() {
        if !pb.ops.mesh.nodes[i].corner {
            assert!((v - expect[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn shear_has_no_normal_stress() {
    let pb = Problem::build(&spec(false), &NoiseSpec::zero()).unwrap();
    let f = pb.ops.grid.sample(|_, y| [y * (1.0 - y), 0.0]);
    let bt = boundary_terms(&pb, &f, &vec![0.0; pb.ops.grid.n_cells()]).unwrap();
    assert!(bt.normal_stress.iter().all(|v| v.abs() <= 1e-12));
    assert!(bt.pi_hat.iter().all(|v| *v == 0.0));
}
