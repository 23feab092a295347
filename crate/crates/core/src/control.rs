//! Controls, cost, gradient, projection onto the admissible set, projected
//! gradient descent and the constants ledger.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    adjoint_moments, adjoint_solve_pathwise, adjoint_solve_regression, boundary_density,
    tracking_source, RegressionSpec,
};
use crate::dynamics::{
    control_norms, forward_ensemble, BrownianPath, ControlPrep, ForwardTrajectory, MomentConstants,
    Problem,
};
use crate::error::{check_len, Error, Result};
use crate::geometry::{enforce_compatibility, BoundaryMesh};
use crate::operators::{dot, mdot};
use crate::stats::{mean_stderr, neumaier_sum, Estimate};

/// Boundary data at every time node: `a[k][i]`, `b[k][i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPair {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl ControlPair {
    pub fn zeros(nodes: usize, nb: usize) -> Self {
        Self {
            a: vec![vec![0.0; nb]; nodes],
            b: vec![vec![0.0; nb]; nodes],
        }
    }

    /// Samples `f(t, node) -> (a, b)`; `a` is made compatible per node.
    pub fn from_fn<F: Fn(f64, usize) -> (f64, f64)>(
        times: &[f64],
        mesh: &BoundaryMesh,
        f: F,
    ) -> Self {
        let mut out = Self::zeros(times.len(), mesh.len());
        for (k, &t) in times.iter().enumerate() {
            for i in 0..mesh.len() {
                let (a, b) = f(t, i);
                out.a[k][i] = a;
                out.b[k][i] = b;
            }
            out.a[k] = enforce_compatibility(&out.a[k], mesh).expect("length");
        }
        out
    }

    pub fn nodes(&self) -> usize {
        self.a.len()
    }

    /// `(a_k, b_k)` concatenated.
    pub fn theta(&self, k: usize) -> Vec<f64> {
        let mut t = self.a[k].clone();
        t.extend_from_slice(&self.b[k]);
        t
    }

    pub fn check_shape(&self, nodes: usize, nb: usize) -> Result<()> {
        check_len("control time nodes (a)", nodes, self.a.len())?;
        check_len("control time nodes (b)", nodes, self.b.len())?;
        for (a, b) in self.a.iter().zip(&self.b) {
            check_len("boundary nodes (a)", nb, a.len())?;
            check_len("boundary nodes (b)", nb, b.len())?;
        }
        if self
            .a
            .iter()
            .chain(&self.b)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Invalid("control values are not finite".into()));
        }
        Ok(())
    }

    /// `|int a dgamma| <= tol max(1, max|a| * perimeter)` at every node.
    pub fn check_compatible(&self, mesh: &BoundaryMesh, tol: f64) -> Result<()> {
        for a in &self.a {
            let s = neumaier_sum(a.iter().zip(&mesh.nodes).map(|(v, n)| v * n.weight));
            let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())) * mesh.perimeter;
            if s.abs() > tol * scale.max(1.0) {
                return Err(Error::Incompatible(s));
            }
        }
        Ok(())
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &ControlPair) -> ControlPair {
        let f = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            x.iter()
                .zip(y)
                .map(|(r, q)| r.iter().zip(q).map(|(u, v)| u + s * v).collect())
                .collect()
        };
        ControlPair {
            a: f(&self.a, &other.a),
            b: f(&self.b, &other.b),
        }
    }

    pub fn scale(&self, s: f64) -> ControlPair {
        ControlPair::zeros(self.nodes(), self.a.first().map_or(0, |r| r.len())).axpy(s, self)
    }

    /// `sum_k wt_k sum_i w_i (a a' + b b')`.
    pub fn inner(&self, other: &ControlPair, wt: &[f64], mesh: &BoundaryMesh) -> f64 {
        neumaier_sum((0..self.nodes()).map(|k| {
            wt[k]
                * mesh
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| {
                        n.weight * (self.a[k][i] * other.a[k][i] + self.b[k][i] * other.b[k][i])
                    })
                    .sum::<f64>()
        }))
    }

    pub fn norm(&self, wt: &[f64], mesh: &BoundaryMesh) -> f64 {
        self.inner(self, wt, mesh).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.a
            .iter()
            .chain(&self.b)
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Nodewise box `|a|, |b| <= bound` plus compatibility of `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleSet {
    pub bound: f64,
}

impl AdmissibleSet {
    pub fn new(bound: f64) -> Result<Self> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::Invalid(format!(
                "bound must be positive, got {bound}"
            )));
        }
        Ok(Self { bound })
    }

    pub fn contains(&self, c: &ControlPair, mesh: &BoundaryMesh, tol: f64) -> bool {
        c.max_abs() <= self.bound * (1.0 + tol) && c.check_compatible(mesh, tol).is_ok()
    }
}

/// Weighted-L2 projection of one time slice of `a` onto
/// `{|x| <= B, sum w x = 0}`: `x = clip(a - mu)` with `mu` found by bisection.
fn project_slice(a: &[f64], w: &[f64], bound: f64) -> Vec<f64> {
    let clip = |v: f64| v.clamp(-bound, bound);
    let flux = |mu: f64| -> f64 { neumaier_sum(a.iter().zip(w).map(|(x, wi)| wi * clip(x - mu))) };
    let lo0 = a.iter().fold(f64::INFINITY, |m, v| m.min(*v)) - bound;
    let hi0 = a.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) + bound;
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if flux(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    let x: Vec<f64> = a.iter().map(|v| clip(v - mu)).collect();
    // remove the bisection round-off where it keeps the box
    let total: f64 = w.iter().sum();
    let resid = neumaier_sum(x.iter().zip(w).map(|(v, wi)| v * wi)) / total;
    if x.iter().all(|v| (v - resid).abs() <= bound) {
        x.iter().map(|v| v - resid).collect()
    } else {
        x
    }
}

pub fn project_admissible(
    c: &ControlPair,
    set: &AdmissibleSet,
    mesh: &BoundaryMesh,
) -> ControlPair {
    let w = mesh.weights();
    let a =
        c.a.iter()
            .map(|r| project_slice(r, &w, set.bound))
            .collect();
    let b =
        c.b.iter()
            .map(|r| r.iter().map(|v| v.clamp(-set.bound, set.bound)).collect())
            .collect();
    ControlPair { a, b }
}

/// Tracking target `y_d = S_k + E tau_k(omega)`: a face series shared by all
/// samples plus optional per-sample Galerkin coefficients.
#[derive(Clone, Debug)]
pub struct Target {
    pub shared: Vec<Vec<f64>>,
    pub coeffs: Option<Vec<Vec<Vec<f64>>>>,
}

impl Target {
    pub fn zero(problem: &Problem) -> Self {
        Self {
            shared: vec![vec![0.0; problem.ops.n_faces()]; problem.time.steps + 1],
            coeffs: None,
        }
    }

    /// Samples an analytic field `f(t, x, y)` on the faces.
    pub fn analytic<F: Fn(f64, f64, f64) -> [f64; 2]>(problem: &Problem, f: F) -> Self {
        let shared = problem
            .time
            .times()
            .iter()
            .map(|&t| problem.ops.grid.sample(|x, y| f(t, x, y)))
            .collect();
        Self {
            shared,
            coeffs: None,
        }
    }

    /// Recorded runs: the target on sample `s` is that run's state.
    pub fn recorded(prep: &ControlPrep, runs: &[ForwardTrajectory]) -> Self {
        Self {
            shared: prep.faces.clone(),
            coeffs: Some(runs.iter().map(|r| r.coeffs.clone()).collect()),
        }
    }

    pub fn tau(&self, sample: usize, k: usize) -> Option<&[f64]> {
        self.coeffs.as_ref().map(|c| c[sample][k].as_slice())
    }

    pub fn check(&self, problem: &Problem, samples: usize) -> Result<()> {
        check_len(
            "target time nodes",
            problem.time.steps + 1,
            self.shared.len(),
        )?;
        for s in &self.shared {
            check_len("target faces", problem.ops.n_faces(), s.len())?;
        }
        if let Some(c) = &self.coeffs {
            if c.len() < samples {
                return Err(Error::Mismatch(format!(
                    "target has {} recorded samples, ensemble {}",
                    c.len(),
                    samples
                )));
            }
        }
        Ok(())
    }
}

/// Control-dependent quantities of the tracking term. With `d_k = A_k - S_k`:
/// `s_k = P d_k`, `q_k = |d_k|_M^2`, `lu_k = (l_u, d_k)_M`.
#[derive(Clone, Debug)]
pub struct TrackPrep {
    pub s: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub lu: Vec<Vec<f64>>,
}

pub fn track_prep(problem: &Problem, prep: &ControlPrep, target: &Target) -> TrackPrep {
    let mass = &problem.ops.mass;
    let rows: Vec<(Vec<f64>, f64, Vec<f64>)> = prep
        .faces
        .par_iter()
        .zip(&target.shared)
        .map(|(a, s)| {
            let d: Vec<f64> = a.iter().zip(s).map(|(x, y)| x - y).collect();
            let dv = DVector::from_column_slice(&d);
            let sp = (&problem.basis.projector * &dv).as_slice().to_vec();
            let q = mdot(mass, &d, &d);
            let lu = (&problem.lifts_m * &dv).as_slice().to_vec();
            (sp, q, lu)
        })
        .collect();
    let mut out = TrackPrep {
        s: vec![],
        q: vec![],
        lu: vec![],
    };
    for (s, q, l) in rows {
        out.s.push(s);
        out.q.push(q);
        out.lu.push(l);
    }
    out
}

/// Penalty weights of the cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub tracking: Estimate,
    pub penalty_a: f64,
    pub penalty_b: f64,
    pub total: Estimate,
}

/// `sum_k wt_k 1/2 |y_k - yd_k|_M^2` on one sample.
pub fn sample_tracking(
    problem: &Problem,
    tp: &TrackPrep,
    traj: &ForwardTrajectory,
    tau: Option<&Vec<Vec<f64>>>,
) -> f64 {
    let wt = problem.time.trapezoid();
    neumaier_sum((0..=problem.time.steps).map(|k| {
        let e: Vec<f64> = match tau {
            Some(t) => traj.coeffs[k]
                .iter()
                .zip(&t[k])
                .map(|(a, b)| a - b)
                .collect(),
            None => traj.coeffs[k].clone(),
        };
        wt[k] * 0.5 * (dot(&e, &e) + 2.0 * dot(&e, &tp.s[k]) + tp.q[k])
    }))
}

pub fn penalties(problem: &Problem, controls: &ControlPair, w: &CostWeights) -> (f64, f64) {
    let wt = problem.time.trapezoid();
    let mesh = &problem.ops.mesh;
    let part = |x: &Vec<Vec<f64>>| -> f64 {
        neumaier_sum((0..x.len()).map(|k| {
            wt[k]
                * x[k]
                    .iter()
                    .zip(&mesh.nodes)
                    .map(|(v, n)| v * v * n.weight)
                    .sum::<f64>()
        }))
    };
    (
        0.5 * w.lambda1 * part(&controls.a),
        0.5 * w.lambda2 * part(&controls.b),
    )
}

pub fn evaluate_cost(
    problem: &Problem,
    controls: &ControlPair,
    prep: &ControlPrep,
    target: &Target,
    ensemble: &[ForwardTrajectory],
    w: &CostWeights,
) -> Result<CostBreakdown> {
    target.check(problem, ensemble.len())?;
    let tp = track_prep(problem, prep, target);
    let tr: Vec<f64> = ensemble
        .par_iter()
        .enumerate()
        .map(|(s, t)| sample_tracking(problem, &tp, t, target.coeffs.as_ref().map(|c| &c[s])))
        .collect();
    let tracking = mean_stderr(&tr);
    let (pa, pb) = penalties(problem, controls, w);
    Ok(CostBreakdown {
        total: Estimate {
            mean: tracking.mean + pa + pb,
            stderr: tracking.stderr,
        },
        tracking,
        penalty_a: pa,
        penalty_b: pb,
    })
}

/// How the adjoint is obtained for gradients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GradientMode {
    /// Per-path transpose sweep: exact gradient of the sample-average cost.
    #[default]
    Pathwise,
    /// Conditional expectations by regression.
    Regression(RegressionSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientPair {
    pub g_a: Vec<Vec<f64>>,
    pub g_b: Vec<Vec<f64>>,
    /// Density of the cost derivative w.r.t. the boundary data.
    pub sigma: ControlPair,
}

impl GradientPair {
    pub fn as_pair(&self) -> ControlPair {
        ControlPair {
            a: self.g_a.clone(),
            b: self.g_b.clone(),
        }
    }
}

/// Everything one evaluation at a control produces.
pub struct Evaluation {
    pub prep: ControlPrep,
    pub ensemble: Vec<ForwardTrajectory>,
    pub cost: CostBreakdown,
}

pub fn evaluate(
    problem: &Problem,
    controls: &ControlPair,
    target: &Target,
    y0: &[f64],
    paths: &[BrownianPath],
    w: &CostWeights,
) -> Result<Evaluation> {
    let prep = problem.prepare(controls)?;
    let ensemble = forward_ensemble(problem, &prep, y0, paths)?;
    let cost = evaluate_cost(problem, controls, &prep, target, &ensemble, w)?;
    Ok(Evaluation {
        prep,
        ensemble,
        cost,
    })
}

pub fn assemble_gradient(
    problem: &Problem,
    controls: &ControlPair,
    eval: &Evaluation,
    target: &Target,
    w: &CostWeights,
    mode: &GradientMode,
) -> Result<GradientPair> {
    let tp = track_prep(problem, &eval.prep, target);
    let srcs: Vec<Vec<Vec<f64>>> = eval
        .ensemble
        .par_iter()
        .enumerate()
        .map(|(s, t)| tracking_source(problem, &tp, t, target.coeffs.as_ref().map(|c| &c[s])))
        .collect();
    let adj = match mode {
        GradientMode::Pathwise => eval
            .ensemble
            .par_iter()
            .zip(&srcs)
            .map(|(t, u)| adjoint_solve_pathwise(problem, &eval.prep, t, u))
            .collect::<Result<Vec<_>>>()?,
        GradientMode::Regression(spec) => {
            adjoint_solve_regression(problem, &eval.prep, &eval.ensemble, &srcs, spec)?.pairs
        }
    };
    let mom = adjoint_moments(problem, &eval.ensemble, &adj, target)?;
    let sigma = boundary_density(problem, &eval.prep, &tp, &mom);
    let g_a = sigma
        .a
        .iter()
        .zip(&controls.a)
        .map(|(s, a)| s.iter().zip(a).map(|(x, y)| x + w.lambda1 * y).collect())
        .collect();
    let g_b = sigma
        .b
        .iter()
        .zip(&controls.b)
        .map(|(s, b)| s.iter().zip(b).map(|(x, y)| x + w.lambda2 * y).collect())
        .collect();
    Ok(GradientPair { g_a, g_b, sigma })
}

/// `|x - Proj(x - g)|_Gamma`.
pub fn projected_gradient_norm(
    problem: &Problem,
    controls: &ControlPair,
    grad: &ControlPair,
    set: &AdmissibleSet,
) -> f64 {
    let mesh = &problem.ops.mesh;
    let p = project_admissible(&controls.axpy(-1.0, grad), set, mesh);
    controls
        .axpy(-1.0, &p)
        .norm(&problem.time.trapezoid(), mesh)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdOptions {
    pub max_iters: usize,
    pub tol_g: f64,
    pub armijo_c: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
    #[serde(default)]
    pub mode: GradientMode,
}

impl Default for PgdOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol_g: 1e-6,
            armijo_c: 1e-4,
            initial_step: 1.0,
            max_backtracks: 30,
            mode: GradientMode::Pathwise,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub stderr: f64,
    pub step: f64,
    pub grad_norm: f64,
    pub backtracks: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    pub stop_reason: String,
}

impl OptimizationTrace {
    /// CSV without wall time so that reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,J,stderr,step,grad_norm,backtracks\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
                r.iteration, r.cost, r.stderr, r.step, r.grad_norm, r.backtracks
            ));
        }
        s
    }
}

/// Everything PGD needs besides the initial controls.
pub struct PgdProblem<'a> {
    pub problem: &'a Problem,
    pub target: &'a Target,
    pub y0: &'a [f64],
    pub paths: &'a [BrownianPath],
    pub weights: CostWeights,
    pub set: AdmissibleSet,
}

pub struct PgdResult {
    pub controls: ControlPair,
    pub trace: OptimizationTrace,
    pub gradient: GradientPair,
    pub cost: CostBreakdown,
}

pub fn optimize_pgd(
    ctx: &PgdProblem,
    initial: &ControlPair,
    opt: &PgdOptions,
) -> Result<PgdResult> {
    let problem = ctx.problem;
    let mesh = &problem.ops.mesh;
    let wt = problem.time.trapezoid();
    let start = Instant::now();
    let mut x = project_admissible(initial, &ctx.set, mesh);
    let mut ev = evaluate(problem, &x, ctx.target, ctx.y0, ctx.paths, &ctx.weights)?;
    let mut g = assemble_gradient(problem, &x, &ev, ctx.target, &ctx.weights, &opt.mode)?;
    let mut trace = OptimizationTrace::default();
    let mut step = opt.initial_step;
    let mut prev: Option<(ControlPair, ControlPair)> = None;
    for it in 0..=opt.max_iters {
        let gp = g.as_pair();
        let gnorm = projected_gradient_norm(problem, &x, &gp, &ctx.set);
        trace.rows.push(TraceRow {
            iteration: it,
            cost: ev.cost.total.mean,
            stderr: ev.cost.total.stderr,
            step,
            grad_norm: gnorm,
            backtracks: 0,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if gnorm <= opt.tol_g {
            trace.converged = true;
            trace.stop_reason = "projected gradient below tolerance".into();
            break;
        }
        if it == opt.max_iters {
            trace.stop_reason = "iteration limit".into();
            break;
        }
        if let Some((px, pg)) = &prev {
            let dx = x.axpy(-1.0, px);
            let dg = gp.axpy(-1.0, pg);
            let sy = dx.inner(&dg, &wt, mesh);
            if sy > 0.0 {
                step = dx.inner(&dx, &wt, mesh) / sy;
            }
        }
        let mut backtracks = 0;
        let accepted = loop {
            let trial = project_admissible(&x.axpy(-step, &gp), &ctx.set, mesh);
            let d = trial.axpy(-1.0, &x);
            let slope = gp.inner(&d, &wt, mesh);
            match evaluate(problem, &trial, ctx.target, ctx.y0, ctx.paths, &ctx.weights) {
                Ok(e) if e.cost.total.mean <= ev.cost.total.mean + opt.armijo_c * slope => {
                    break Some((trial, e));
                }
                Ok(_) | Err(Error::BlowUp { .. }) => {}
                Err(e) => return Err(e),
            }
            backtracks += 1;
            step *= 0.5;
            if backtracks > opt.max_backtracks {
                break None;
            }
        };
        if let Some(r) = trace.rows.last_mut() {
            r.backtracks = backtracks;
            r.step = step;
        }
        match accepted {
            Some((trial, e)) => {
                let ng =
                    assemble_gradient(problem, &trial, &e, ctx.target, &ctx.weights, &opt.mode)?;
                prev = Some((x, gp));
                x = trial;
                ev = e;
                g = ng;
            }
            None => {
                trace.stop_reason = format!(
                    "no Armijo step after {} halvings at iteration {it}",
                    opt.max_backtracks
                );
                break;
            }
        }
    }
    Ok(PgdResult {
        controls: x,
        trace,
        gradient: g,
        cost: ev.cost,
    })
}

/// `min over probes of <g, probe - x>_Gamma`, probes uniform in the box and
/// compatibility-corrected.
pub fn optimality_residual(
    problem: &Problem,
    controls: &ControlPair,
    grad: &ControlPair,
    set: &AdmissibleSet,
    probes: usize,
    seed: u64,
) -> f64 {
    let mesh = &problem.ops.mesh;
    let wt = problem.time.trapezoid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = controls.nodes();
    let nb = mesh.len();
    (0..probes)
        .map(|_| {
            let mut p = ControlPair::zeros(nodes, nb);
            for k in 0..nodes {
                for i in 0..nb {
                    p.a[k][i] = rng.gen_range(-set.bound..=set.bound);
                    p.b[k][i] = rng.gen_range(-set.bound..=set.bound);
                }
            }
            let p = project_admissible(&p, set, mesh);
            grad.inner(&p.axpy(-1.0, controls), &wt, mesh)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Estimated constants and the feasibility verdicts built from them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantsLedger {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub ct1: f64,
    pub ct2: f64,
    pub c_hat: f64,
    pub nu: f64,
    pub l_bound: f64,
    pub k_bound: f64,
    pub t_end: f64,
    pub bound: f64,
    pub r_star: f64,
    pub a_star: f64,
    pub b_star: f64,
    pub lambda_star_end: f64,
    pub beta_star_end: f64,
    pub c_max: f64,
    pub verdict_optimality: Option<bool>,
    pub verdict_stability: Option<bool>,
    pub verdict_linearization: Option<bool>,
    /// Every estimated constant is a surrogate for an existential one.
    pub surrogate: bool,
}

/// Inputs of the ledger.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConstantFits {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub ct1: f64,
    pub ct2: f64,
    pub c_hat: f64,
}

impl ConstantsLedger {
    pub fn moments(&self) -> MomentConstants {
        MomentConstants {
            nu: self.nu,
            l_bound: self.l_bound,
            r_star: self.r_star,
            c_hat: self.c_hat,
            t_end: self.t_end,
        }
    }
}

/// Largest surrogate norm over the box: alternating `+-B` patterns with
/// period 4 maximize the centered difference.
pub fn sup_surrogate_norm(mesh: &BoundaryMesh, bound: f64) -> f64 {
    let nb = mesh.len();
    let pat: Vec<f64> = (0..nb)
        .map(|k| if (k / 2) % 2 == 0 { bound } else { -bound })
        .collect();
    let flat = vec![bound; nb];
    let a = crate::operators::lifting::surrogate_norm(&pat, &flat, mesh);
    let b = crate::operators::lifting::surrogate_norm(&flat, &flat, mesh);
    a.max(b)
}

pub fn constants_report(
    problem: &Problem,
    fits: &ConstantFits,
    set: &AdmissibleSet,
    k_bound: f64,
) -> Result<ConstantsLedger> {
    let nu = problem.nu();
    let l_bound = problem.noise.l_bound;
    let t_end = problem.time.t_end;
    let s = sup_surrogate_norm(&problem.ops.mesh, set.bound);
    let r_star = 2.0 * fits.c0 * (1.0 + s * s);
    let c_max = 24.0 * fits.c1.max(fits.c2).max(fits.ct1).max(fits.ct2) * nu.powi(-2).max(1.0);
    let mut led = ConstantsLedger {
        c0: fits.c0,
        c1: fits.c1,
        c2: fits.c2,
        ct1: fits.ct1,
        ct2: fits.ct2,
        c_hat: fits.c_hat,
        nu,
        l_bound,
        k_bound,
        t_end,
        bound: set.bound,
        r_star,
        a_star: f64::NAN,
        b_star: f64::NAN,
        lambda_star_end: f64::NAN,
        beta_star_end: f64::NAN,
        c_max,
        verdict_optimality: None,
        verdict_stability: None,
        verdict_linearization: None,
        surrogate: true,
    };
    if problem.noise.is_zero() || l_bound <= 0.0 {
        return Ok(led);
    }
    let m = led.moments();
    led.a_star = m.a_star();
    led.b_star = m.b_star();
    led.lambda_star_end = m.lambda_star(t_end);
    led.beta_star_end = m.beta_star(t_end);
    led.refresh_verdicts();
    Ok(led)
}

impl ConstantsLedger {
    /// Recomputes the verdicts from the stored fields.
    pub fn refresh_verdicts(&mut self) {
        if !self.a_star.is_finite() {
            return;
        }
        let lhs = self.a_star.min(self.b_star).min(self.b_star / self.c_hat);
        let inv2 = self.nu.powi(-2).max(1.0);
        self.verdict_optimality = Some(lhs >= self.c_max);
        self.verdict_stability =
            Some(self.a_star >= 32.0 * self.c1.max(self.c2) * (1.0 / self.nu).max(1.0));
        self.verdict_linearization = Some(lhs >= 24.0 * self.ct1.max(self.ct2) * inv2);
    }
}

/// Empirical Gronwall rate `max_k max(0, d/dt log(1 + e_k)) / f_k`.
pub fn gronwall_rate(series: &[Vec<f64>], rate_basis: &[Vec<f64>], dt: f64) -> f64 {
    let mut best = 0.0f64;
    for (e, f) in series.iter().zip(rate_basis) {
        for k in 0..e.len().saturating_sub(1) {
            let g = ((1.0 + e[k + 1]) / (1.0 + e[k])).ln() / dt;
            if g > 0.0 && f[k] > 0.0 {
                best = best.max(g / f[k]);
            }
        }
    }
    best
}

/// Fits of the state growth constant from forward runs.
pub fn fit_c0(problem: &Problem, controls: &ControlPair, runs: &[ForwardTrajectory]) -> f64 {
    let s = control_norms(problem, controls);
    let f: Vec<f64> = s.iter().map(|v| 1.0 + v * v).collect();
    let e: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| r.coeffs.iter().map(|c| dot(c, c)).collect())
        .collect();
    let fs = vec![f; e.len()];
    gronwall_rate(&e, &fs, problem.time.dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, DomainSpec};

    fn mesh() -> BoundaryMesh {
        build_geometry(&DomainSpec::unit(8, 8)).unwrap().1
    }

    #[test]
    fn constant_violator_projects_to_zero() {
        let m = mesh();
        let set = AdmissibleSet::new(0.5).unwrap();
        let mut c = ControlPair::zeros(3, m.len());
        c.a.iter_mut().flatten().for_each(|v| *v = 1.0);
        let p = project_admissible(&c, &set, &m);
        assert!(p.a.iter().flatten().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn inside_is_unchanged() {
        let m = mesh();
        let set = AdmissibleSet::new(2.0).unwrap();
        let t = [0.0, 0.5, 1.0];
        let c = ControlPair::from_fn(&t, &m, |t, i| ((i as f64 * 0.3 + t).sin(), 0.5));
        let p = project_admissible(&c, &set, &m);
        for (x, y) in c.a.iter().flatten().zip(p.a.iter().flatten()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(c.b, p.b);
    }

    #[test]
    fn gronwall_rate_of_exponential() {
        let dt = 0.01;
        let e: Vec<f64> = (0..50).map(|k| (0.3 * k as f64 * dt).exp() - 1.0).collect();
        let r = gronwall_rate(&[e], &[vec![1.0; 50]], dt);
        assert!((r - 0.3).abs() < 1e-9);
    }
}
