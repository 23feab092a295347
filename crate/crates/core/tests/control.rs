use proptest::prelude::*;

use slipctl::control::{
    assemble_gradient, constants_report, evaluate, optimality_residual, optimize_pgd,
    project_admissible, projected_gradient_norm, AdmissibleSet, ConstantFits, ControlPair,
    CostWeights, GradientMode, PgdOptions, PgdProblem, Target,
};
use slipctl::dynamics::{forward_ensemble, sample_paths, Problem, ProblemSpec};
use slipctl::geometry::{build_geometry, BoundaryMesh, DomainSpec};
use slipctl::noise::NoiseSpec;

fn spec(t_end: f64) -> ProblemSpec {
    ProblemSpec {
        domain: DomainSpec::unit(8, 8),
        modes: 6,
        steps: 16,
        t_end,
        ..ProblemSpec::desk()
    }
}

fn controls(pb: &Problem, amp: f64) -> ControlPair {
    let mesh = &pb.ops.mesh;
    ControlPair::from_fn(&pb.time.times(), mesh, |t, i| {
        (
            amp * (i as f64 * 0.5 + t).sin(),
            amp * (i as f64 * 0.3).cos(),
        )
    })
}

#[test]
fn self_target_has_zero_tracking() {
    let pb = Problem::build(&spec(1.0), &NoiseSpec::multiplicative(2, 1e-2)).unwrap();
    let c = controls(&pb, 0.3);
    let y0 = vec![0.2; pb.n()];
    let paths = sample_paths(3, 2, &pb.time, 8);
    let prep = pb.prepare(&c).unwrap();
    let runs = forward_ensemble(&pb, &prep, &y0, &paths).unwrap();
    let target = Target::recorded(&prep, &runs);
    let w = CostWeights {
        lambda1: 0.1,
        lambda2: 0.2,
    };
    let ev = evaluate(&pb, &c, &target, &y0, &paths, &w).unwrap();
    assert!(ev.cost.tracking.mean.abs() <= 1e-28);
    // at a zero residual only the penalties drive the gradient
    let g = assemble_gradient(&pb, &c, &ev, &target, &w, &GradientMode::Pathwise).unwrap();
    for k in 0..c.nodes() {
        for i in 0..pb.nb() {
            assert!((g.g_a[k][i] - 0.1 * c.a[k][i]).abs() <= 1e-12);
            assert!((g.g_b[k][i] - 0.2 * c.b[k][i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn constant_target_against_rest() {
    let pb = Problem::build(&spec(1.0), &NoiseSpec::zero()).unwrap();
    let zero = ControlPair::zeros(pb.time.steps + 1, pb.nb());
    let v = 0.7;
    let target = Target::analytic(&pb, |_, _, _| [v, 0.0]);
    let paths = sample_paths(0, 0, &pb.time, 1);
    let w = CostWeights {
        lambda1: 1.0,
        lambda2: 1.0,
    };
    let ev = evaluate(&pb, &zero, &target, &vec![0.0; pb.n()], &paths, &w).unwrap();
    let expect = 0.5 * v * v * 1.0 * pb.time.t_end;
    assert!(
        (ev.cost.tracking.mean - expect).abs() <= 1e-12,
        "{}",
        ev.cost.tracking.mean
    );
    assert_eq!(ev.cost.penalty_a, 0.0);
    assert_eq!(ev.cost.penalty_b, 0.0);
}

#[test]
fn penalties_are_weighted_squares() {
    let pb = Problem::build(&spec(2.0), &NoiseSpec::zero()).unwrap();
    let mesh = &pb.ops.mesh;
    let c = ControlPair::from_fn(&pb.time.times(), mesh, |_, _| (0.0, 0.5));
    let target = Target::zero(&pb);
    let w = CostWeights {
        lambda1: 1.0,
        lambda2: 3.0,
    };
    let ev = evaluate(
        &pb,
        &c,
        &target,
        &vec![0.0; pb.n()],
        &sample_paths(0, 0, &pb.time, 1),
        &w,
    )
    .unwrap();
    // 0.5 * 3 * 0.25 * perimeter 4 * T 2
    assert!(
        (ev.cost.penalty_b - 3.0).abs() <= 1e-12,
        "{}",
        ev.cost.penalty_b
    );
}

#[test]
fn non_optimal_point_has_negative_residual() {
    let pb = Problem::build(&spec(1.0), &NoiseSpec::zero()).unwrap();
    let star = controls(&pb, 0.4);
    let y0 = vec![0.2; pb.n()];
    let paths = sample_paths(0, 0, &pb.time, 1);
    let prep = pb.prepare(&star).unwrap();
    let runs = forward_ensemble(&pb, &prep, &y0, &paths).unwrap();
    let target = Target::recorded(&prep, &runs);
    let w = CostWeights {
        lambda1: 1e-4,
        lambda2: 1e-4,
    };
    let zero = ControlPair::zeros(pb.time.steps + 1, pb.nb());
    let ev = evaluate(&pb, &zero, &target, &y0, &paths, &w).unwrap();
    let g = assemble_gradient(&pb, &zero, &ev, &target, &w, &GradientMode::Pathwise).unwrap();
    let set = AdmissibleSet::new(1.0).unwrap();
    let r = optimality_residual(&pb, &zero, &g.as_pair(), &set, 64, 1);
    assert!(
        r < -0.01 * ev.cost.total.mean,
        "{r} vs {}",
        ev.cost.total.mean
    );
}

#[test]
fn pgd_decreases_monotonically_and_reports_progress() {
    let pb = Problem::build(&spec(1.0), &NoiseSpec::multiplicative(2, 1e-2)).unwrap();
    let star = controls(&pb, 0.4);
    let y0 = vec![0.2; pb.n()];
    let paths = sample_paths(9, 2, &pb.time, 16);
    let prep = pb.prepare(&star).unwrap();
    let runs = forward_ensemble(&pb, &prep, &y0, &paths).unwrap();
    let target = Target::recorded(&prep, &runs);
    let ctx = PgdProblem {
        problem: &pb,
        target: &target,
        y0: &y0,
        paths: &paths,
        weights: CostWeights {
            lambda1: 1e-3,
            lambda2: 1e-3,
        },
        set: AdmissibleSet::new(1.0).unwrap(),
    };
    let zero = ControlPair::zeros(pb.time.steps + 1, pb.nb());
    let res = optimize_pgd(
        &ctx,
        &zero,
        &PgdOptions {
            max_iters: 15,
            ..Default::default()
        },
    )
    .unwrap();
    let costs: Vec<f64> = res.trace.rows.iter().map(|r| r.cost).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    assert!(costs.last().unwrap() < &(0.2 * costs[0]));
    assert!(ctx.set.contains(&res.controls, &pb.ops.mesh, 1e-10));
    let gn = projected_gradient_norm(&pb, &res.controls, &res.gradient.as_pair(), &ctx.set);
    assert!((gn - res.trace.rows.last().unwrap().grad_norm).abs() <= 1e-14 * gn.max(1.0));
    let csv = res.trace.to_csv();
    assert_eq!(csv.lines().count(), res.trace.rows.len() + 1);
}

fn fits(c0: f64) -> ConstantFits {
    ConstantFits {
        c0,
        c1: 1e-4,
        c2: 1e-4,
        ct1: 1e-4,
        ct2: 1e-4,
        c_hat: 0.05,
    }
}

#[test]
fn a_star_halves_when_l_doubles() {
    let set = AdmissibleSet::new(0.01).unwrap();
    let l1 = constants_report(
        &Problem::build(&spec(1.0), &NoiseSpec::multiplicative(2, 1e-2)).unwrap(),
        &fits(0.1),
        &set,
        1e-2,
    )
    .unwrap();
    let l2 = constants_report(
        &Problem::build(&spec(1.0), &NoiseSpec::multiplicative(2, 2e-2)).unwrap(),
        &fits(0.1),
        &set,
        1e-2,
    )
    .unwrap();
    assert!((l1.a_star / l2.a_star - 2.0).abs() <= 1e-12);
    assert!(l1.surrogate);
}

#[test]
fn verdict_flips_as_the_horizon_grows() {
    let set = AdmissibleSet::new(0.01).unwrap();
    let verdict = |t: f64| {
        let pb = Problem::build(&spec(t), &NoiseSpec::multiplicative(2, 1e-2)).unwrap();
        constants_report(&pb, &fits(1.0), &set, 1e-2)
            .unwrap()
            .verdict_stability
    };
    assert_eq!(verdict(0.1), Some(true));
    assert_eq!(verdict(2.0), Some(false));
}

#[test]
fn zero_noise_has_no_verdicts() {
    let pb = Problem::build(&spec(1.0), &NoiseSpec::zero()).unwrap();
    let l = constants_report(&pb, &fits(0.1), &AdmissibleSet::new(1.0).unwrap(), 0.0).unwrap();
    assert!(l.verdict_optimality.is_none() && l.verdict_stability.is_none() && l.verdict_linearization.is_none());
}

fn mesh() -> BoundaryMesh {
    build_geometry(&DomainSpec::unit(8, 8)).unwrap().1
}

fn pair(v: &[f64], nodes: usize, nb: usize) -> ControlPair {
    let row = |o: usize| -> Vec<Vec<f64>> {
        (0..nodes)
            .map(|k| v[o + k * nb..o + (k + 1) * nb].to_vec())
            .collect()
    };
    ControlPair {
        a: row(0),
        b: row(nodes * nb),
    }
}

const NODES: usize = 3;
const NB: usize = 32;

proptest! {
    #[test]
    fn projection_is_idempotent_and_feasible(
        v in prop::collection::vec(-3.0f64..3.0, 2 * NODES * NB),
        bound in 0.1f64..2.0,
    ) {
        let m = mesh();
        let set = AdmissibleSet::new(bound).unwrap();
        let p = project_admissible(&pair(&v, NODES, NB), &set, &m);
        prop_assert!(set.contains(&p, &m, 1e-10));
        let q = project_admissible(&p, &set, &m);
        prop_assert!(p.axpy(-1.0, &q).max_abs() <= 1e-12);
    }

    #[test]
    fn projection_is_nonexpansive(
        v in prop::collection::vec(-3.0f64..3.0, 2 * NODES * NB),
        u in prop::collection::vec(-3.0f64..3.0, 2 * NODES * NB),
        bound in 0.1f64..2.0,
    ) {
        let m = mesh();
        let wt = [0.25, 0.5, 0.25];
        let set = AdmissibleSet::new(bound).unwrap();
        let (x, y) = (pair(&v, NODES, NB), pair(&u, NODES, NB));
        let (px, py) = (project_admissible(&x, &set, &m), project_admissible(&y, &set, &m));
        let d = px.axpy(-1.0, &py).norm(&wt, &m);
        prop_assert!(d <= x.axpy(-1.0, &y).norm(&wt, &m) * (1.0 + 1e-10) + 1e-12);
        // obtuse angle at the projection
        let r = x.axpy(-1.0, &px).inner(&py.axpy(-1.0, &px), &wt, &m);
        prop_assert!(r <= 1e-9);
    }
}
