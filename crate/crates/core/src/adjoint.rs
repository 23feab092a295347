//! Backward (adjoint) system as the exact transpose of the linearized
//! forward step, its regression estimator, pressure recovery, boundary
//! diagnostics and the duality check.
//!
//! With `W_k` the weighted tracking source, one backward step reads
//!
//! ```text
//! psi_{k+1} = p_{k+1} + W_{k+1},   mu_{k+1} = M_k^{-T} psi_{k+1}
//! p_k = mu + sum_j dG^j(y_k)^T mu dW^j_k - dt [T(c_{k+1})^T mu + B(A_{k+1})^T mu]
//! ```
//!
//! and `psi_0 = p_0 + W_0` pairs with the initial perturbation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{track_prep, ControlPair, CostWeights, Target, TrackPrep};
use crate::dynamics::{
    direction_forcing, forward_ensemble, linearized_solve, BrownianPath, ControlPrep,
    ForwardTrajectory, Problem,
};
use crate::error::{check_len, Error, Result};
use crate::operators::{dot, spmv};
use crate::stats::{mean_stderr, neumaier_sum, Estimate};

#[derive(Clone, Debug, Default)]
pub struct AdjointPair {
    /// `p_k`, `k = 0..=N`, with `p_N = 0`.
    pub p: Vec<Vec<f64>>,
    /// `mu_k`, `k = 1..=N` (`mu[0]` is zero).
    pub mu: Vec<Vec<f64>>,
    /// `mu_k + sum_j dG^T mu_k dW^j_{k-1}`.
    pub eta: Vec<Vec<f64>>,
    /// `q_k^j`, regression only.
    pub q: Vec<Vec<Vec<f64>>>,
    pub psi0: Vec<f64>,
}

/// `W_k = wt_k (c_k - tau_k + s_k)`.
pub fn tracking_source(
    problem: &Problem,
    tp: &TrackPrep,
    traj: &ForwardTrajectory,
    tau: Option<&Vec<Vec<f64>>>,
) -> Vec<Vec<f64>> {
    let wt = problem.time.trapezoid();
    (0..=problem.time.steps)
        .map(|k| {
            (0..problem.n())
                .map(|i| {
                    let t = tau.map_or(0.0, |t| t[k][i]);
                    wt[k] * (traj.coeffs[k][i] - t + tp.s[k][i])
                })
                .collect()
        })
        .collect()
}

struct BackStep {
    mu: Vec<f64>,
    eta: Vec<f64>,
    target: Vec<f64>,
}

fn back_step(
    problem: &Problem,
    prep: &ControlPrep,
    state: &ForwardTrajectory,
    k: usize,
    psi: &[f64],
) -> Result<BackStep> {
    let dt = problem.time.dt;
    let ck = &state.coeffs[k];
    let m = problem.step_matrix(ck, &prep.ca[k]).transpose();
    let mu = m
        .lu()
        .solve(&DVector::from_column_slice(psi))
        .ok_or_else(|| Error::Singular(format!("transposed step matrix at step {k}")))?;
    let mu = mu.as_slice().to_vec();
    let eta = if problem.noise.is_zero() {
        mu.clone()
    } else {
        let yh = state.projected(prep, k);
        let g = problem
            .noise
            .jac_adj_sum(&yh, &mu, &state.path.increments[k]);
        mu.iter().zip(&g).map(|(a, b)| a + b).collect()
    };
    let tv = problem.tensor_v(&state.coeffs[k + 1], &mu);
    let wv = prep.wv[k].tr_mul(&DVector::from_column_slice(&mu));
    let target = (0..mu.len())
        .map(|i| eta[i] - dt * problem.adjoint_convection_sign * (tv[i] + wv[i]))
        .collect();
    Ok(BackStep { mu, eta, target })
}

fn check_source(problem: &Problem, state: &ForwardTrajectory, src: &[Vec<f64>]) -> Result<()> {
    let nt = problem.time.steps;
    if state.coeffs.len() != nt + 1 || src.len() != nt + 1 {
        return Err(Error::Mismatch(format!(
            "time grid has {} nodes, state {} and source {}",
            nt + 1,
            state.coeffs.len(),
            src.len()
        )));
    }
    check_len("adjoint source", problem.n(), src[0].len())
}

/// Exact transpose sweep along one path.
pub fn adjoint_solve_pathwise(
    problem: &Problem,
    prep: &ControlPrep,
    state: &ForwardTrajectory,
    src: &[Vec<f64>],
) -> Result<AdjointPair> {
    check_source(problem, state, src)?;
    let n = problem.n();
    let nt = problem.time.steps;
    let mut out = AdjointPair {
        p: vec![vec![0.0; n]; nt + 1],
        mu: vec![vec![0.0; n]; nt + 1],
        eta: vec![vec![0.0; n]; nt + 1],
        q: vec![],
        psi0: vec![],
    };
    for k in (0..nt).rev() {
        let psi: Vec<f64> = out.p[k + 1]
            .iter()
            .zip(&src[k + 1])
            .map(|(a, b)| a + b)
            .collect();
        let s = back_step(problem, prep, state, k, &psi)?;
        out.p[k] = s.target;
        out.mu[k + 1] = s.mu;
        out.eta[k + 1] = s.eta;
    }
    out.psi0 = out.p[0].iter().zip(&src[0]).map(|(a, b)| a + b).collect();
    Ok(out)
}

/// Transpose sweep for a run without noise.
pub fn adjoint_solve_deterministic(
    problem: &Problem,
    prep: &ControlPrep,
    state: &ForwardTrajectory,
    src: &[Vec<f64>],
) -> Result<AdjointPair> {
    if !problem.noise.is_zero() {
        return Err(Error::Invalid(
            "deterministic adjoint needs a run without noise".into(),
        ));
    }
    adjoint_solve_pathwise(problem, prep, state, src)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeatureMap {
    #[default]
    Linear,
    /// Adds pairwise products `c_i c_j`, `i <= j`, up to `cap` of them.
    Quadratic { cap: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    #[serde(default)]
    pub features: FeatureMap,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    1e-10
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            features: FeatureMap::Linear,
            ridge: default_ridge(),
        }
    }
}

impl RegressionSpec {
    pub fn feature_count(&self, n: usize) -> usize {
        match self.features {
            FeatureMap::Linear => n,
            FeatureMap::Quadratic { cap } => n + cap.min(n * (n + 1) / 2),
        }
    }

    fn features(&self, c: &[f64]) -> Vec<f64> {
        let mut f = c.to_vec();
        if let FeatureMap::Quadratic { cap } = self.features {
            let n = c.len();
            'outer: for i in 0..n {
                for j in i..n {
                    if f.len() - n >= cap {
                        break 'outer;
                    }
                    f.push(c[i] * c[j]);
                }
            }
        }
        f
    }
}

/// Ridge least squares with intercept on centered features via SVD.
struct Fit {
    xmean: DVector<f64>,
    ymean: DVector<f64>,
    beta: DMatrix<f64>,
}

impl Fit {
    fn new(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64, step: usize) -> Result<Self> {
        let m = x.nrows() as f64;
        let xmean = x.row_mean().transpose();
        let ymean = y.row_mean().transpose();
        let mut xc = x.clone();
        for mut r in xc.row_iter_mut() {
            r -= xmean.transpose();
        }
        let mut yc = y.clone();
        for mut r in yc.row_iter_mut() {
            r -= ymean.transpose();
        }
        let scale = x
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0f64, f64::max)
            .max(1e-300);
        let svd = xc.svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(v)) => (u, v),
            _ => {
                return Err(Error::Regression {
                    step,
                    reason: "SVD did not converge".into(),
                })
            }
        };
        let lam = ridge * m;
        let uty = u.tr_mul(&yc);
        let mut coef = uty;
        for (i, s) in svd.singular_values.iter().enumerate() {
            let f = if *s <= 1e-12 * scale {
                0.0
            } else {
                s / (s * s + lam)
            };
            coef.row_mut(i).scale_mut(f);
        }
        let beta = vt.tr_mul(&coef);
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression {
                step,
                reason: "non-finite coefficients".into(),
            });
        }
        Ok(Self { xmean, ymean, beta })
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        let d = DVector::from_column_slice(x) - &self.xmean;
        (&self.ymean + self.beta.tr_mul(&d)).as_slice().to_vec()
    }
}

fn rows(v: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = v.first().map_or(0, |r| r.len());
    DMatrix::from_fn(v.len(), cols, |i, j| v[i][j])
}

pub struct RegressionOutput {
    pub pairs: Vec<AdjointPair>,
    /// Cross-fitted squared mean residual per step.
    pub martingale: Vec<f64>,
}

impl RegressionOutput {
    pub fn mean_martingale(&self) -> f64 {
        neumaier_sum(self.martingale.iter().copied()) / self.martingale.len() as f64
    }
}

fn held_out(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    fit_rows: &[usize],
    eval_rows: &[usize],
    ridge: f64,
    step: usize,
) -> Result<f64> {
    let xs = x.select_rows(fit_rows);
    let ys = y.select_rows(fit_rows);
    let f = Fit::new(&xs, &ys, ridge, step)?;
    let n = y.ncols();
    let mut acc = vec![0.0; n];
    for &r in eval_rows {
        let xr: Vec<f64> = x.row(r).iter().copied().collect();
        let p = f.predict(&xr);
        for i in 0..n {
            acc[i] += y[(r, i)] - p[i];
        }
    }
    let m = eval_rows.len() as f64;
    Ok(acc.iter().map(|a| (a / m) * (a / m)).sum())
}

/// Backward regression over an ensemble sharing one control.
pub fn adjoint_solve_regression(
    problem: &Problem,
    prep: &ControlPrep,
    states: &[ForwardTrajectory],
    srcs: &[Vec<Vec<f64>>],
    spec: &RegressionSpec,
) -> Result<RegressionOutput> {
    let m = states.len();
    let n = problem.n();
    let nt = problem.time.steps;
    let nf = spec.feature_count(n);
    if srcs.len() != m {
        return Err(Error::Mismatch(format!(
            "{m} states but {} sources",
            srcs.len()
        )));
    }
    if 4 * nf > m {
        return Err(Error::Regression {
            step: nt,
            reason: format!("{nf} features need at least {} samples, got {m}", 4 * nf),
        });
    }
    if !(spec.ridge >= 0.0) {
        return Err(Error::Invalid("ridge must be nonnegative".into()));
    }
    for (s, u) in states.iter().zip(srcs) {
        check_source(problem, s, u)?;
    }
    let mch = problem.noise.m;
    let mut pairs: Vec<AdjointPair> = (0..m)
        .map(|_| AdjointPair {
            p: vec![vec![0.0; n]; nt + 1],
            mu: vec![vec![0.0; n]; nt + 1],
            eta: vec![vec![0.0; n]; nt + 1],
            q: vec![vec![vec![0.0; n]; mch]; nt],
            psi0: vec![],
        })
        .collect();
    let mut martingale = vec![0.0; nt];
    let even: Vec<usize> = (0..m).step_by(2).collect();
    let odd: Vec<usize> = (1..m).step_by(2).collect();
    let dt = problem.time.dt;
    for k in (0..nt).rev() {
        let steps: Vec<BackStep> = (0..m)
            .into_par_iter()
            .map(|s| {
                let psi: Vec<f64> = pairs[s].p[k + 1]
                    .iter()
                    .zip(&srcs[s][k + 1])
                    .map(|(a, b)| a + b)
                    .collect();
                back_step(problem, prep, &states[s], k, &psi)
            })
            .collect::<Result<_>>()?;
        let feats: Vec<Vec<f64>> = states
            .par_iter()
            .map(|s| spec.features(&s.coeffs[k]))
            .collect();
        let x = rows(&feats);
        let targets: Vec<Vec<f64>> = steps.iter().map(|s| s.target.clone()).collect();
        let y = rows(&targets);
        let fit = Fit::new(&x, &y, spec.ridge, k)?;
        martingale[k] = 0.5
            * (held_out(&x, &y, &even, &odd, spec.ridge, k)?
                + held_out(&x, &y, &odd, &even, spec.ridge, k)?);
        for j in 0..mch {
            let qt: Vec<Vec<f64>> = (0..m)
                .map(|s| {
                    let w = states[s].path.increments[k][j] / dt;
                    pairs[s].p[k + 1].iter().map(|v| v * w).collect()
                })
                .collect();
            let qf = Fit::new(&x, &rows(&qt), spec.ridge, k)?;
            for s in 0..m {
                pairs[s].q[k][j] = qf.predict(&feats[s]);
            }
        }
        for (s, st) in steps.into_iter().enumerate() {
            pairs[s].p[k] = fit.predict(&feats[s]);
            pairs[s].mu[k + 1] = st.mu;
            pairs[s].eta[k + 1] = st.eta;
        }
    }
    for (pair, src) in pairs.iter_mut().zip(srcs) {
        pair.psi0 = pair.p[0].iter().zip(&src[0]).map(|(a, b)| a + b).collect();
    }
    Ok(RegressionOutput { pairs, martingale })
}

/// Ensemble averages entering the boundary density.
#[derive(Clone, Debug)]
pub struct AdjointMoments {
    /// `E[c_k - tau_k]`.
    pub ct: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    /// `E[mu_k c_{k-1}^T]`.
    pub x: Vec<DMatrix<f64>>,
    /// `E[mu_k c_k^T]`.
    pub y: Vec<DMatrix<f64>>,
    pub psi0: Vec<f64>,
}

pub fn adjoint_moments(
    problem: &Problem,
    states: &[ForwardTrajectory],
    adj: &[AdjointPair],
    target: &Target,
) -> Result<AdjointMoments> {
    if states.len() != adj.len() || states.is_empty() {
        return Err(Error::Mismatch(format!(
            "{} states and {} adjoint solutions",
            states.len(),
            adj.len()
        )));
    }
    let n = problem.n();
    let nt = problem.time.steps;
    let inv = 1.0 / states.len() as f64;
    let per_k = |k: usize| {
        let mut ct = vec![0.0; n];
        let mut mu = vec![0.0; n];
        let mut eta = vec![0.0; n];
        let mut x = DMatrix::zeros(n, n);
        let mut y = DMatrix::zeros(n, n);
        for (s, (st, a)) in states.iter().zip(adj).enumerate() {
            let tau = target.tau(s, k);
            for i in 0..n {
                ct[i] += st.coeffs[k][i] - tau.map_or(0.0, |t| t[i]);
            }
            if k == 0 {
                continue;
            }
            let m = DVector::from_column_slice(&a.mu[k]);
            x += &m * DVector::from_column_slice(&st.coeffs[k - 1]).transpose();
            y += &m * DVector::from_column_slice(&st.coeffs[k]).transpose();
            for i in 0..n {
                mu[i] += a.mu[k][i];
                eta[i] += a.eta[k][i];
            }
        }
        let sc = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x * inv).collect() };
        (sc(ct), sc(mu), sc(eta), x * inv, y * inv)
    };
    let all: Vec<_> = (0..=nt).into_par_iter().map(per_k).collect();
    let mut out = AdjointMoments {
        ct: vec![],
        mu: vec![],
        eta: vec![],
        x: vec![],
        y: vec![],
        psi0: vec![0.0; n],
    };
    for (ct, mu, eta, x, y) in all {
        out.ct.push(ct);
        out.mu.push(mu);
        out.eta.push(eta);
        out.x.push(x);
        out.y.push(y);
    }
    for a in adj {
        for i in 0..n {
            out.psi0[i] += a.psi0[i] * inv;
        }
    }
    Ok(out)
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Density `sigma` of the cost derivative w.r.t. the boundary data in the
/// `<., .>_Gamma` pairing (penalties excluded).
pub fn boundary_density(
    problem: &Problem,
    prep: &ControlPrep,
    tp: &TrackPrep,
    mom: &AdjointMoments,
) -> ControlPair {
    let nt = problem.time.steps;
    let nb = problem.nb();
    let n = problem.n();
    let dt = problem.time.dt;
    let wt = problem.time.trapezoid();
    let conv = problem.spec.convection;
    let rows: Vec<Vec<f64>> = (0..=nt)
        .into_par_iter()
        .map(|k| {
            let mut v = vec![0.0; n];
            for i in 0..n {
                v[i] = wt[k] * mom.ct[k][i];
                if k >= 1 {
                    v[i] -= mom.mu[k][i];
                }
                if k < nt {
                    v[i] += mom.eta[k + 1][i];
                }
                if k == 0 {
                    v[i] -= mom.psi0[i];
                }
            }
            let mut g = problem.plift.tr_mul(&DVector::from_vec(v));
            for u in 0..2 * nb {
                g[u] += wt[k] * tp.lu[k][u];
            }
            if k >= 1 {
                g += problem
                    .unit_r
                    .tr_mul(&DVector::from_column_slice(&mom.mu[k]))
                    * dt;
            }
            if conv {
                let mut cov = vec![0.0; problem.ops.n_faces()];
                if k >= 1 {
                    let f = problem.field(&mom.mu[k]);
                    let c = problem.conv.cov_v(&prep.faces[k - 1], &f);
                    cov.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
                    for u in 0..2 * nb {
                        g[u] -= dt * frob(&problem.unit_tv[u], &mom.x[k]);
                    }
                }
                if k < nt {
                    let f = problem.field(&mom.mu[k + 1]);
                    let c = problem.conv.cov_w(&prep.faces[k + 1], &f);
                    cov.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
                    for u in 0..2 * nb {
                        g[u] -= dt * frob(&problem.unit_tw[u], &mom.y[k + 1]);
                    }
                }
                g -= problem.lifts.tr_mul(&DVector::from_vec(cov)) * dt;
            }
            g.as_slice().to_vec()
        })
        .collect();
    let w = problem.ops.mesh.weights();
    let mut sigma = ControlPair::zeros(nt + 1, nb);
    for k in 0..=nt {
        for i in 0..nb {
            sigma.a[k][i] = rows[k][i] / (wt[k] * w[i]);
            sigma.b[k][i] = rows[k][nb + i] / (wt[k] * w[i]);
        }
    }
    sigma
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PressureRecovery {
    /// Cell pressure, zero mean.
    pub pi: Vec<f64>,
    /// Largest cell divergence of the residual after the gradient is removed,
    /// relative to the residual size.
    pub divergence: f64,
}

/// Pressure making `nu Lap p + (convection adjoint) + U` discretely
/// divergence-free. `p` and `u` are face fields, `y` the state.
pub fn recover_pressure(
    problem: &Problem,
    p: &[f64],
    y: &[f64],
    u: &[f64],
) -> Result<PressureRecovery> {
    let ops = &problem.ops;
    let nf = ops.n_faces();
    check_len("adjoint field", nf, p.len())?;
    check_len("state field", nf, y.len())?;
    check_len("source field", nf, u.len())?;
    let kp = spmv(&ops.gram_v, p);
    let (cv, cw) = if problem.spec.convection {
        (problem.conv.cov_v(y, p), problem.conv.cov_w(y, p))
    } else {
        (vec![0.0; nf], vec![0.0; nf])
    };
    let mut r: Vec<f64> = (0..nf)
        .map(|f| -problem.nu() * kp[f] - cv[f] - cw[f] + ops.mass[f] * u[f])
        .collect();
    for (f, v) in r.iter_mut().enumerate() {
        if ops.grid.is_wall_face(f) {
            *v = 0.0;
        }
    }
    let pi: Vec<f64> = problem
        .lifting
        .pressure(ops, &r)
        .iter()
        .map(|v| -v)
        .collect();
    let field: Vec<f64> = r.iter().zip(&ops.mass).map(|(a, m)| a / m).collect();
    let gp = spmv(&ops.grad, &pi);
    let rest: Vec<f64> = (0..nf)
        .map(|f| {
            if ops.grid.is_wall_face(f) {
                0.0
            } else {
                field[f] - gp[f]
            }
        })
        .collect();
    let dv = ops.divergence(&rest);
    let scale = field.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let div = dv.iter().fold(0.0f64, |m, v| m.max(v.abs())) * ops.grid.hx.min(ops.grid.hy);
    Ok(PressureRecovery {
        pi,
        divergence: div / scale,
    })
}

/// Strong-form adjoint quantities at the boundary nodes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdjointBoundaryData {
    pub pi_hat: Vec<f64>,
    pub normal_stress: Vec<f64>,
    pub p_tau: Vec<f64>,
}

/// One-sided boundary values from the cells touching each node.
pub fn boundary_terms(problem: &Problem, p: &[f64], pi: &[f64]) -> Result<AdjointBoundaryData> {
    use crate::geometry::Side;
    let ops = &problem.ops;
    let g = &ops.grid;
    check_len("adjoint field", ops.n_faces(), p.len())?;
    check_len("pressure", g.n_cells(), pi.len())?;
    let d11 = spmv(&ops.d11, p);
    let d22 = spmv(&ops.d22, p);
    let mut out = AdjointBoundaryData {
        pi_hat: vec![],
        normal_stress: vec![],
        p_tau: ops.mesh.tangential_trace(p),
    };
    for nd in &ops.mesh.nodes {
        let vi = (nd.pos[0] / g.hx).round() as isize;
        let vj = (nd.pos[1] / g.hy).round() as isize;
        let mut cells = vec![];
        for ci in [vi - 1, vi] {
            for cj in [vj - 1, vj] {
                if ci >= 0 && cj >= 0 && (ci as usize) < g.nx && (cj as usize) < g.ny {
                    cells.push(g.cell(ci as usize, cj as usize));
                }
            }
        }
        let avg = |v: &[f64]| cells.iter().map(|&c| v[c]).sum::<f64>() / cells.len() as f64;
        let dn = match nd.side {
            Side::Bottom | Side::Top => avg(&d22),
            Side::Left | Side::Right => avg(&d11),
        };
        out.normal_stress.push(2.0 * problem.nu() * dn);
        out.pi_hat.push(avg(pi));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DualityMode {
    PathwiseDet,
    Expectation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualityReport {
    pub mode: DualityMode,
    /// `sum_k wt_k (z_k, y_k - yd_k)_M`.
    pub lhs: Estimate,
    /// Adjoint side per sample.
    pub rhs: Estimate,
    /// Per-sample `lhs - rhs`.
    pub defect: Estimate,
    /// `<sigma, (f, g)>_Gamma` from the ensemble density.
    pub boundary_pairing: f64,
    pub relative: f64,
    pub samples: usize,
}

/// Sum `sum_k W_k . dc_k` against `psi_0 . dc_0 + sum_k mu_{k+1} . h_k` on
/// one path, for any source.
pub fn transpose_identity(
    problem: &Problem,
    prep: &ControlPrep,
    dir: &crate::dynamics::DirPrep,
    state: &ForwardTrajectory,
    lin: &crate::dynamics::LinearizedTrajectory,
    adj: &AdjointPair,
    src: &[Vec<f64>],
) -> (f64, f64) {
    let nt = problem.time.steps;
    let lhs = neumaier_sum((0..=nt).map(|k| dot(&src[k], &lin.coeffs[k])));
    let mut terms = vec![dot(&adj.psi0, &lin.coeffs[0])];
    for k in 0..nt {
        let h = direction_forcing(problem, prep, dir, state, k);
        terms.push(dot(&adj.mu[k + 1], &h));
    }
    (lhs, neumaier_sum(terms))
}

pub struct DualitySetup<'a> {
    pub problem: &'a Problem,
    pub controls: &'a ControlPair,
    pub direction: &'a ControlPair,
    pub target: &'a Target,
    pub y0: &'a [f64],
    pub paths: &'a [BrownianPath],
}

pub fn duality_check(
    setup: &DualitySetup,
    mode: DualityMode,
    regression: &RegressionSpec,
) -> Result<DualityReport> {
    let problem = setup.problem;
    let paths = match mode {
        DualityMode::PathwiseDet => {
            if !problem.noise.is_zero() {
                return Err(Error::Invalid(
                    "pathwise duality needs a run without noise".into(),
                ));
            }
            &setup.paths[..1.min(setup.paths.len())]
        }
        DualityMode::Expectation => setup.paths,
    };
    if paths.is_empty() {
        return Err(Error::Invalid("no sample paths".into()));
    }
    setup.target.check(problem, paths.len())?;
    let prep = problem.prepare(setup.controls)?;
    let dir = problem.prepare_direction(&prep, setup.direction)?;
    let states = forward_ensemble(problem, &prep, setup.y0, paths)?;
    let tp = track_prep(problem, &prep, setup.target);
    let taus: Vec<Option<&Vec<Vec<f64>>>> = (0..states.len())
        .map(|s| setup.target.coeffs.as_ref().map(|c| &c[s]))
        .collect();
    let srcs: Vec<Vec<Vec<f64>>> = states
        .par_iter()
        .zip(&taus)
        .map(|(st, t)| tracking_source(problem, &tp, st, *t))
        .collect();
    let adj = match mode {
        DualityMode::PathwiseDet => vec![adjoint_solve_deterministic(
            problem, &prep, &states[0], &srcs[0],
        )?],
        DualityMode::Expectation => {
            adjoint_solve_regression(problem, &prep, &states, &srcs, regression)?.pairs
        }
    };
    let wt = problem.time.trapezoid();
    let nt = problem.time.steps;
    let per: Vec<(f64, f64)> = (0..states.len())
        .into_par_iter()
        .map(|s| -> Result<(f64, f64)> {
            let st = &states[s];
            let lin = linearized_solve(problem, &prep, st, &dir)?;
            let (l0, r0) = transpose_identity(problem, &prep, &dir, st, &lin, &adj[s], &srcs[s]);
            // terms of (z, y - yd) not carried by dc
            let explicit = neumaier_sum((0..=nt).map(|k| {
                let e: f64 = (0..problem.n())
                    .map(|i| dir.pf[k][i] * (st.coeffs[k][i] - taus[s].map_or(0.0, |t| t[k][i])))
                    .sum();
                wt[k] * (e + dot(&dir.theta[k], &tp.lu[k]))
            }));
            Ok((l0 + explicit, r0 + explicit))
        })
        .collect::<Result<_>>()?;
    let mom = adjoint_moments(problem, &states, &adj, setup.target)?;
    let sigma = boundary_density(problem, &prep, &tp, &mom);
    let pairing = sigma.inner(setup.direction, &wt, &problem.ops.mesh);
    let lhs = mean_stderr(&per.iter().map(|p| p.0).collect::<Vec<_>>());
    let rhs = mean_stderr(&per.iter().map(|p| p.1).collect::<Vec<_>>());
    let defect = mean_stderr(&per.iter().map(|p| p.0 - p.1).collect::<Vec<_>>());
    let relative = match mode {
        DualityMode::PathwiseDet => {
            (lhs.mean - pairing).abs() / lhs.mean.abs().max(pairing.abs()).max(1e-300)
        }
        DualityMode::Expectation => defect.mean.abs() / lhs.mean.abs().max(1e-300),
    };
    Ok(DualityReport {
        mode,
        lhs,
        rhs,
        defect,
        boundary_pairing: pairing,
        relative,
        samples: per.len(),
    })
}

impl DualityReport {
    /// PATHWISE_DET: relative defect below `tol`; EXPECTATION: mean defect
    /// within three standard errors.
    pub fn passes(&self, tol: f64) -> bool {
        match self.mode {
            DualityMode::PathwiseDet => self.relative <= tol,
            DualityMode::Expectation => {
                let scale = self.lhs.mean.abs().max(1e-300);
                self.defect.mean.abs() <= 3.0 * self.defect.stderr + tol * scale
            }
        }
    }
}

/// Central finite-difference check of the assembled gradient in one
/// direction; returns `(fd, <g, dir>)`.
pub fn fd_directional(
    setup: &DualitySetup,
    grad: &ControlPair,
    w: &CostWeights,
    eps: f64,
) -> Result<(f64, f64)> {
    let problem = setup.problem;
    let j = |c: &ControlPair| -> Result<f64> {
        let e = crate::control::evaluate(problem, c, setup.target, setup.y0, setup.paths, w)?;
        Ok(e.cost.total.mean)
    };
    let jp = j(&setup.controls.axpy(eps, setup.direction))?;
    let jm = j(&setup.controls.axpy(-eps, setup.direction))?;
    let wt = problem.time.trapezoid();
    Ok((
        (jp - jm) / (2.0 * eps),
        grad.inner(setup.direction, &wt, &problem.ops.mesh),
    ))
}
