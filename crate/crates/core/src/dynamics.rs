//! Time stepping of the state in Galerkin coordinates, the linearized
//! (Oseen) system on a shared Brownian path, energy ledgers, weights and
//! exponential-moment diagnostics.
//!
//! The state is `y = E c + A`, with `A` the Stokes lifting of the boundary
//! data at the same time node and `c` the coefficients of the homogeneous
//! part. One step tests the equation against every basis mode:
//!
//! ```text
//! (y_{k+1} - y_k, e) + nu dt [(y_{k+1}, e)_V - sum w b_{k+1} (e.tau)]
//!     + dt b(y_k, y_{k+1}, e) = sum_j (G^j(y_k), e) dW^j_k
//! ```
//!
//! so viscosity is implicit and convection is linearly implicit (transport
//! velocity from the previous step).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlPair;
use crate::error::{check_len, Error, Result};
use crate::geometry::{build_geometry, DomainSpec};
use crate::noise::{NoiseModel, NoiseSpec};
use crate::operators::lifting::{surrogate_norm, unit_lifts};
use crate::operators::{
    assemble_operators, dot, spmv, stokes_eigenbasis, DiscreteOperators, GalerkinBasis,
    LiftingSolver, Trilinear,
};
use crate::stats::{mean_stderr, neumaier_sum, Estimate};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_end: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::Invalid(format!(
                "horizon must be positive, got {t_end}"
            )));
        }
        if steps < 16 {
            return Err(Error::Invalid(format!(
                "need at least 16 steps, got {steps}"
            )));
        }
        Ok(Self {
            t_end,
            steps,
            dt: t_end / steps as f64,
        })
    }
    pub fn time(&self, k: usize) -> f64 {
        self.t_end * k as f64 / self.steps as f64
    }
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
    /// Trapezoid weights on the time nodes.
    pub fn trapezoid(&self) -> Vec<f64> {
        let mut w = vec![self.dt; self.steps + 1];
        w[0] *= 0.5;
        w[self.steps] *= 0.5;
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    pub seed: u64,
    pub m: usize,
    /// `increments[k][j]`, step `k`, channel `j`.
    pub increments: Vec<Vec<f64>>,
}

pub fn sample_brownian(seed: u64, m: usize, time: &TimeGrid) -> BrownianPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = time.dt.sqrt();
    let increments = (0..time.steps)
        .map(|_| {
            (0..m)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                })
                .collect()
        })
        .collect();
    BrownianPath {
        seed,
        m,
        increments,
    }
}

/// Seed of Monte Carlo sample `i` derived from the base seed.
pub fn sample_seed(base: u64, i: usize) -> u64 {
    base ^ i as u64
}

pub fn sample_paths(base: u64, m: usize, time: &TimeGrid, count: usize) -> Vec<BrownianPath> {
    (0..count)
        .into_par_iter()
        .map(|i| sample_brownian(sample_seed(base, i), m, time))
        .collect()
}

/// Discretization parameters of a problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub domain: DomainSpec,
    pub nu: f64,
    pub alpha: f64,
    pub t_end: f64,
    pub steps: usize,
    pub modes: usize,
    #[serde(default = "yes")]
    pub convection: bool,
    #[serde(default = "default_ceiling")]
    pub ceiling: f64,
}

fn yes() -> bool {
    true
}
fn default_ceiling() -> f64 {
    1e6
}

impl ProblemSpec {
    pub fn desk() -> Self {
        Self {
            domain: DomainSpec::unit(32, 32),
            nu: 0.1,
            alpha: 0.5,
            t_end: 1.0,
            steps: 256,
            modes: 16,
            convection: true,
            ceiling: default_ceiling(),
        }
    }
}

/// Everything that is fixed across controls and samples.
pub struct Problem {
    pub spec: ProblemSpec,
    pub ops: DiscreteOperators,
    pub basis: GalerkinBasis,
    pub conv: Trilinear,
    pub time: TimeGrid,
    pub noise: NoiseModel,
    pub lifting: LiftingSolver,
    /// Faces x 2nb unit lifts; the first `nb` columns are normal data.
    pub lifts: DMatrix<f64>,
    /// `P` applied to the unit lifts, n x 2nb.
    pub plift: DMatrix<f64>,
    /// `lifts^T M`, 2nb x faces.
    pub lifts_m: DMatrix<f64>,
    /// `T_i[(l, j)] = b(e_i, e_j, e_l)`.
    pub tensor: Vec<DMatrix<f64>>,
    /// `b(l_u, e_j, e_l)` per unit.
    pub unit_tw: Vec<DMatrix<f64>>,
    /// `b(e_i, l_u, e_l)` per unit.
    pub unit_tv: Vec<DMatrix<f64>>,
    /// `nu (sum w b_u (e.tau) - (l_u, e)_V)`, n x 2nb.
    pub unit_r: DMatrix<f64>,
    /// Tangential trace of the modes, nb x n.
    pub trace_e: DMatrix<f64>,
    /// Sign of the convection terms in the backward step; `-1` only for
    /// fault injection.
    pub adjoint_convection_sign: f64,
}

impl Problem {
    pub fn build(spec: &ProblemSpec, noise: &NoiseSpec) -> Result<Self> {
        if !(spec.nu > 0.0) {
            return Err(Error::Invalid(format!(
                "viscosity must be positive, got {}",
                spec.nu
            )));
        }
        if !(spec.ceiling > 0.0) {
            return Err(Error::Invalid("blow-up ceiling must be positive".into()));
        }
        let (grid, mesh) = build_geometry(&spec.domain)?;
        let ops = assemble_operators(&grid, &mesh, spec.alpha, spec.nu)?;
        let basis = stokes_eigenbasis(&ops, spec.modes, &ops.alpha_nodes())?;
        let time = TimeGrid::new(spec.t_end, spec.steps)?;
        let noise = NoiseModel::from_spec(noise, spec.modes)?;
        let conv = Trilinear::assemble(&ops);
        let lifting = LiftingSolver::new(&ops)?;
        let lifts = unit_lifts(&ops, &lifting);
        let plift = &basis.projector * &lifts;
        let mut lifts_m = lifts.transpose();
        for (f, w) in ops.mass.iter().enumerate() {
            lifts_m.column_mut(f).scale_mut(*w);
        }
        let nb = mesh.len();
        let units = 2 * nb;
        let n = basis.n;
        let (tensor, unit_tw, unit_tv) = if spec.convection {
            let tensor = conv.state_tensor(&basis);
            let cols: Vec<Vec<f64>> = (0..units)
                .map(|u| lifts.column(u).iter().copied().collect())
                .collect();
            let tw: Vec<DMatrix<f64>> = cols
                .par_iter()
                .map(|c| conv.contract_w(c, &basis))
                .collect();
            let tv: Vec<DMatrix<f64>> = cols
                .par_iter()
                .map(|c| conv.contract_v(c, &basis))
                .collect();
            (tensor, tw, tv)
        } else {
            let z = DMatrix::zeros(n, n);
            (vec![z.clone(); n], vec![z.clone(); units], vec![z; units])
        };
        let mut unit_r = DMatrix::zeros(n, units);
        let zero = vec![0.0; nb];
        for u in 0..units {
            let col: Vec<f64> = lifts.column(u).iter().copied().collect();
            let b = if u < nb {
                zero.clone()
            } else {
                let mut e = zero.clone();
                e[u - nb] = 1.0;
                e
            };
            let res = lifting.residual(&ops, &col, &b);
            let r = basis.vectors.tr_mul(&DVector::from_vec(res)) * (-spec.nu);
            unit_r.set_column(u, &r);
        }
        let mut trace_e = DMatrix::zeros(nb, n);
        for k in 0..n {
            let tr = spmv(&ops.trace, &basis.mode(k));
            trace_e.set_column(k, &DVector::from_vec(tr));
        }
        Ok(Self {
            spec: spec.clone(),
            ops,
            basis,
            conv,
            time,
            noise,
            lifting,
            lifts,
            plift,
            lifts_m,
            tensor,
            unit_tw,
            unit_tv,
            unit_r,
            trace_e,
            adjoint_convection_sign: 1.0,
        })
    }

    pub fn n(&self) -> usize {
        self.basis.n
    }
    pub fn nb(&self) -> usize {
        self.ops.mesh.len()
    }
    pub fn nu(&self) -> f64 {
        self.spec.nu
    }

    /// Face field of the homogeneous part.
    pub fn field(&self, c: &[f64]) -> Vec<f64> {
        (&self.basis.vectors * DVector::from_column_slice(c))
            .as_slice()
            .to_vec()
    }

    fn combine(&self, mats: &[DMatrix<f64>], w: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for (m, x) in mats.iter().zip(w) {
            if *x != 0.0 {
                out += m * *x;
            }
        }
        out
    }

    /// `M_k = I + nu dt Lambda + dt (sum_i c_i T_i + ca)`.
    pub fn step_matrix(&self, c: &[f64], ca: &DMatrix<f64>) -> DMatrix<f64> {
        let dt = self.time.dt;
        let mut m = self.combine(&self.tensor, c) + ca;
        m *= dt;
        for (i, l) in self.basis.eigenvalues.iter().enumerate() {
            m[(i, i)] += 1.0 + self.spec.nu * dt * l;
        }
        m
    }

    /// `sum_i c_i T_i^T mu` contracted over `(l, j)` with `c` on `j`:
    /// returns `v_i = mu^T T_i c`.
    pub fn tensor_v(&self, c: &[f64], mu: &[f64]) -> Vec<f64> {
        let cv = DVector::from_column_slice(c);
        let mv = DVector::from_column_slice(mu);
        self.tensor.iter().map(|t| mv.dot(&(t * &cv))).collect()
    }

    /// Per-control data shared by all samples.
    pub fn prepare(&self, controls: &ControlPair) -> Result<ControlPrep> {
        controls.check_shape(self.time.steps + 1, self.nb())?;
        controls.check_compatible(&self.ops.mesh, 1e-10)?;
        Ok(self.prepare_unchecked(controls))
    }

    pub(crate) fn prepare_unchecked(&self, controls: &ControlPair) -> ControlPrep {
        let nt = self.time.steps;
        let theta: Vec<Vec<f64>> = (0..=nt).map(|k| controls.theta(k)).collect();
        let lift = |th: &[f64]| -> Vec<f64> {
            (&self.lifts * DVector::from_column_slice(th))
                .as_slice()
                .to_vec()
        };
        let faces: Vec<Vec<f64>> = theta.par_iter().map(|t| lift(t)).collect();
        let pa: Vec<Vec<f64>> = theta
            .iter()
            .map(|t| {
                (&self.plift * DVector::from_column_slice(t))
                    .as_slice()
                    .to_vec()
            })
            .collect();
        let r: Vec<Vec<f64>> = theta
            .iter()
            .map(|t| {
                (&self.unit_r * DVector::from_column_slice(t))
                    .as_slice()
                    .to_vec()
            })
            .collect();
        let ca: Vec<DMatrix<f64>> = theta
            .iter()
            .map(|t| self.combine(&self.unit_tw, t))
            .collect();
        let wv: Vec<DMatrix<f64>> = (0..nt)
            .map(|k| self.combine(&self.unit_tv, &theta[k + 1]))
            .collect();
        let aa: Vec<Vec<f64>> = (0..nt)
            .into_par_iter()
            .map(|k| {
                if !self.spec.convection {
                    return vec![0.0; self.n()];
                }
                let cov = self.conv.cov_phi(&faces[k], &faces[k + 1]);
                self.basis
                    .vectors
                    .tr_mul(&DVector::from_vec(cov))
                    .as_slice()
                    .to_vec()
            })
            .collect();
        let mesh = &self.ops.mesh;
        let wn: Vec<Vec<f64>> = faces
            .iter()
            .map(|a| {
                mesh.normal_trace(a)
                    .iter()
                    .zip(&mesh.nodes)
                    .map(|(v, nd)| if nd.corner { 0.0 } else { v * nd.weight })
                    .collect()
            })
            .collect();
        ControlPrep {
            theta,
            faces,
            pa,
            r,
            ca,
            wv,
            aa,
            wn,
        }
    }

    /// Lifted data of a direction `(f, g)`.
    pub fn prepare_direction(&self, prep: &ControlPrep, dir: &ControlPair) -> Result<DirPrep> {
        dir.check_shape(self.time.steps + 1, self.nb())?;
        dir.check_compatible(&self.ops.mesh, 1e-10)?;
        let d = self.prepare_unchecked(dir);
        let nt = self.time.steps;
        let fa: Vec<Vec<f64>> = (0..nt)
            .into_par_iter()
            .map(|k| {
                if !self.spec.convection {
                    return vec![0.0; self.n()];
                }
                let mut cov = self.conv.cov_phi(&d.faces[k], &prep.faces[k + 1]);
                let c2 = self.conv.cov_phi(&prep.faces[k], &d.faces[k + 1]);
                cov.iter_mut().zip(&c2).for_each(|(a, b)| *a += b);
                self.basis
                    .vectors
                    .tr_mul(&DVector::from_vec(cov))
                    .as_slice()
                    .to_vec()
            })
            .collect();
        Ok(DirPrep {
            theta: d.theta,
            faces: d.faces,
            pf: d.pa,
            rf: d.r,
            ca: d.ca,
            wv: d.wv,
            fa,
        })
    }
}

/// Lifted control data per time node.
#[derive(Clone, Debug)]
pub struct ControlPrep {
    pub theta: Vec<Vec<f64>>,
    /// Lifting `A_k` on faces.
    pub faces: Vec<Vec<f64>>,
    pub pa: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// `b(A_k, e_j, e_l)`.
    pub ca: Vec<DMatrix<f64>>,
    /// `b(e_i, A_{k+1}, e_l)`.
    pub wv: Vec<DMatrix<f64>>,
    /// `b(A_k, A_{k+1}, e_l)`.
    pub aa: Vec<Vec<f64>>,
    /// Weighted normal trace `w_i (A_k.n)_i`, zero at corners.
    pub wn: Vec<Vec<f64>>,
}

/// Lifted direction data per time node.
#[derive(Clone, Debug)]
pub struct DirPrep {
    pub theta: Vec<Vec<f64>>,
    pub faces: Vec<Vec<f64>>,
    pub pf: Vec<Vec<f64>>,
    pub rf: Vec<Vec<f64>>,
    /// `b(F_k, e_j, e_l)`.
    pub ca: Vec<DMatrix<f64>>,
    /// `b(e_i, F_{k+1}, e_l)`.
    pub wv: Vec<DMatrix<f64>>,
    /// `b(F_k, A_{k+1}, e) + b(A_k, F_{k+1}, e)`.
    pub fa: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct EnergyStep {
    /// `|u_{k+1}|^2`.
    pub energy: f64,
    /// `|u_{k+1}|_V^2`.
    pub v_energy: f64,
    /// `|u_{k+1}|^2 - |u_k|^2 + 2 nu dt |u_{k+1}|_V^2`.
    pub defect: f64,
    /// `|u_{k+1} - u_k|^2`, dissipated by the implicit step.
    pub numerical_dissipation: f64,
    pub boundary_work: f64,
    pub noise_work: f64,
    /// `defect + numerical_dissipation - boundary_work - noise_work`.
    pub ledger_residual: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardTrajectory {
    /// Homogeneous-part coefficients at every time node.
    pub coeffs: Vec<Vec<f64>>,
    pub path: BrownianPath,
    pub ledger: Vec<EnergyStep>,
}

impl ForwardTrajectory {
    /// Projected state `c_k + P A_k`.
    pub fn projected(&self, prep: &ControlPrep, k: usize) -> Vec<f64> {
        self.coeffs[k]
            .iter()
            .zip(&prep.pa[k])
            .map(|(a, b)| a + b)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LinearizedTrajectory {
    pub coeffs: Vec<Vec<f64>>,
    pub seed: u64,
}

impl LinearizedTrajectory {
    /// Projected `z_k = dc_k + P F_k`.
    pub fn projected(&self, dir: &DirPrep, k: usize) -> Vec<f64> {
        self.coeffs[k]
            .iter()
            .zip(&dir.pf[k])
            .map(|(a, b)| a + b)
            .collect()
    }
}

fn solve(m: DMatrix<f64>, rhs: Vec<f64>, step: usize) -> Result<Vec<f64>> {
    m.lu()
        .solve(&DVector::from_vec(rhs))
        .map(|v| v.as_slice().to_vec())
        .ok_or_else(|| Error::Singular(format!("step matrix singular at step {step}")))
}

/// One forward run on a Brownian path. `y0` is the projected initial state.
pub fn forward_solve(
    problem: &Problem,
    prep: &ControlPrep,
    y0: &[f64],
    path: &BrownianPath,
) -> Result<ForwardTrajectory> {
    let n = problem.n();
    let nt = problem.time.steps;
    check_len("initial state", n, y0.len())?;
    check_len("Brownian increments", nt, path.increments.len())?;
    if path.m != problem.noise.m && !problem.noise.is_zero() {
        return Err(Error::Mismatch(format!(
            "path has {} channels, noise model {}",
            path.m, problem.noise.m
        )));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("initial state is not finite".into()));
    }
    let dt = problem.time.dt;
    let nu = problem.nu();
    let mut coeffs = Vec::with_capacity(nt + 1);
    let mut ledger = Vec::with_capacity(nt);
    let c0: Vec<f64> = y0.iter().zip(&prep.pa[0]).map(|(a, b)| a - b).collect();
    coeffs.push(c0);
    for k in 0..nt {
        let ck = &coeffs[k];
        let wvc = &prep.wv[k] * DVector::from_column_slice(ck);
        let forcing: Vec<f64> = (0..n)
            .map(|i| {
                -(prep.pa[k + 1][i] - prep.pa[k][i]) + dt * prep.r[k + 1][i]
                    - dt * (wvc[i] + prep.aa[k][i])
            })
            .collect();
        let noise = if problem.noise.is_zero() {
            vec![0.0; n]
        } else {
            let yh: Vec<f64> = ck.iter().zip(&prep.pa[k]).map(|(a, b)| a + b).collect();
            problem.noise.apply(&yh, &path.increments[k])
        };
        let rhs: Vec<f64> = (0..n).map(|i| ck[i] + forcing[i] + noise[i]).collect();
        let m = problem.step_matrix(ck, &prep.ca[k]);
        let c1 = solve(m, rhs, k)?;
        let norm = dot(&c1, &c1).sqrt();
        if !norm.is_finite() || norm > problem.spec.ceiling {
            return Err(Error::BlowUp {
                step: k + 1,
                norm,
                ceiling: problem.spec.ceiling,
            });
        }
        let e1 = dot(&c1, &c1);
        let v1 = problem.basis.v_norm(&c1).powi(2);
        let e0 = dot(ck, ck);
        let defect = e1 - e0 + 2.0 * nu * dt * v1;
        let diss: f64 = c1.iter().zip(ck).map(|(a, b)| (a - b) * (a - b)).sum();
        let tr = &problem.trace_e * DVector::from_column_slice(&c1);
        let flux: f64 = prep.wn[k]
            .iter()
            .zip(tr.iter())
            .map(|(w, t)| w * t * t)
            .sum();
        let bw = 2.0 * dot(&c1, &forcing) - dt * flux;
        let nw = 2.0 * dot(&c1, &noise);
        ledger.push(EnergyStep {
            energy: e1,
            v_energy: v1,
            defect,
            numerical_dissipation: diss,
            boundary_work: bw,
            noise_work: nw,
            ledger_residual: defect + diss - bw - nw,
        });
        coeffs.push(c1);
    }
    Ok(ForwardTrajectory {
        coeffs,
        path: path.clone(),
        ledger,
    })
}

/// Convenience wrapper that prepares the controls first.
pub fn forward_solve_controls(
    problem: &Problem,
    controls: &ControlPair,
    y0: &[f64],
    path: &BrownianPath,
) -> Result<ForwardTrajectory> {
    let prep = problem.prepare(controls)?;
    forward_solve(problem, &prep, y0, path)
}

/// Forward runs on a set of paths, in sample order.
pub fn forward_ensemble(
    problem: &Problem,
    prep: &ControlPrep,
    y0: &[f64],
    paths: &[BrownianPath],
) -> Result<Vec<ForwardTrajectory>> {
    paths
        .par_iter()
        .map(|p| forward_solve(problem, prep, y0, p))
        .collect()
}

/// Part of the linearized step driven by the direction alone:
/// `-(pf_{k+1} - pf_k) + dt rf_{k+1} - dt [b(F_k, y_{k+1}, e) + b(y_k, F_{k+1}, e)]
/// + sum_j dG^j(y_k) pf_k dW^j_k`.
pub fn direction_forcing(
    problem: &Problem,
    prep: &ControlPrep,
    dir: &DirPrep,
    state: &ForwardTrajectory,
    k: usize,
) -> Vec<f64> {
    let n = problem.n();
    let dt = problem.time.dt;
    let conv = &dir.ca[k] * DVector::from_column_slice(&state.coeffs[k + 1])
        + &dir.wv[k] * DVector::from_column_slice(&state.coeffs[k]);
    let noise = if problem.noise.is_zero() {
        vec![0.0; n]
    } else {
        problem.noise.jac_sum(
            &state.projected(prep, k),
            &dir.pf[k],
            &state.path.increments[k],
        )
    };
    (0..n)
        .map(|i| {
            -(dir.pf[k + 1][i] - dir.pf[k][i]) + dt * dir.rf[k + 1][i]
                - dt * (conv[i] + dir.fa[k][i])
                + noise[i]
        })
        .collect()
}

/// Linearized run along `state` for the direction in `dir`.
pub fn linearized_solve(
    problem: &Problem,
    prep: &ControlPrep,
    state: &ForwardTrajectory,
    dir: &DirPrep,
) -> Result<LinearizedTrajectory> {
    let n = problem.n();
    let nt = problem.time.steps;
    if state.coeffs.len() != nt + 1 || dir.pf.len() != nt + 1 {
        return Err(Error::Mismatch(format!(
            "time grid has {} nodes, state {} and direction {}",
            nt + 1,
            state.coeffs.len(),
            dir.pf.len()
        )));
    }
    check_len("state coefficients", n, state.coeffs[0].len())?;
    let dt = problem.time.dt;
    let mut z = Vec::with_capacity(nt + 1);
    z.push(dir.pf[0].iter().map(|v| -v).collect::<Vec<f64>>());
    for k in 0..nt {
        let ck = &state.coeffs[k];
        let c1v = DVector::from_column_slice(&state.coeffs[k + 1]);
        let zk = &z[k];
        // b(E dc_k, y_{k+1}, e): transport by the perturbation
        let mut conv = &prep.wv[k] * DVector::from_column_slice(zk);
        for (i, t) in problem.tensor.iter().enumerate() {
            if zk[i] != 0.0 {
                conv += t * &c1v * zk[i];
            }
        }
        let noise = if problem.noise.is_zero() {
            vec![0.0; n]
        } else {
            problem
                .noise
                .jac_sum(&state.projected(prep, k), zk, &state.path.increments[k])
        };
        let h = direction_forcing(problem, prep, dir, state, k);
        let rhs: Vec<f64> = (0..n)
            .map(|i| zk[i] - dt * conv[i] + noise[i] + h[i])
            .collect();
        let m = problem.step_matrix(ck, &prep.ca[k]);
        z.push(solve(m, rhs, k)?);
    }
    Ok(LinearizedTrajectory {
        coeffs: z,
        seed: state.path.seed,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateauxRow {
    pub eps: f64,
    /// `E sum_k dt |delta_eps(t_k)|^2`.
    pub l2: Estimate,
    /// Same with the V norm.
    pub v: Estimate,
    pub blowups: usize,
}

/// `delta_eps = (y_eps - y)/eps - z` on shared paths.
pub fn gateaux_check(
    problem: &Problem,
    controls: &ControlPair,
    dir: &ControlPair,
    eps: &[f64],
    y0: &[f64],
    paths: &[BrownianPath],
) -> Result<Vec<GateauxRow>> {
    if eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Invalid("epsilon list must be decreasing".into()));
    }
    let prep = problem.prepare(controls)?;
    let dprep = problem.prepare_direction(&prep, dir)?;
    let base = forward_ensemble(problem, &prep, y0, paths)?;
    let lin: Vec<LinearizedTrajectory> = base
        .par_iter()
        .map(|s| linearized_solve(problem, &prep, s, &dprep))
        .collect::<Result<_>>()?;
    let dt = problem.time.dt;
    let mut rows = Vec::new();
    for &e in eps {
        let pert = controls.axpy(e, dir);
        let pp = problem.prepare(&pert)?;
        let res: Vec<Option<(f64, f64)>> = paths
            .par_iter()
            .enumerate()
            .map(|(s, p)| match forward_solve(problem, &pp, y0, p) {
                Ok(ye) => {
                    let mut l2 = Vec::new();
                    let mut vv = Vec::new();
                    for k in 1..=problem.time.steps {
                        let d: Vec<f64> = (0..problem.n())
                            .map(|i| {
                                (ye.coeffs[k][i] - base[s].coeffs[k][i]) / e - lin[s].coeffs[k][i]
                            })
                            .collect();
                        l2.push(dt * dot(&d, &d));
                        vv.push(dt * problem.basis.v_norm(&d).powi(2));
                    }
                    Some((neumaier_sum(l2), neumaier_sum(vv)))
                }
                Err(_) => None,
            })
            .collect();
        let ok: Vec<(f64, f64)> = res.iter().flatten().copied().collect();
        rows.push(GateauxRow {
            eps: e,
            l2: mean_stderr(&ok.iter().map(|x| x.0).collect::<Vec<_>>()),
            v: mean_stderr(&ok.iter().map(|x| x.1).collect::<Vec<_>>()),
            blowups: res.len() - ok.len(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WeightKind {
    Xi0,
    Xi1,
    Xi2,
    Beta,
}

/// Constants entering the weights.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WeightConstants {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub nu: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightProcess {
    pub kind: WeightKind,
    pub constant: f64,
    pub values: Vec<f64>,
}

/// Surrogate boundary norm of the controls at every time node.
pub fn control_norms(problem: &Problem, controls: &ControlPair) -> Vec<f64> {
    (0..controls.a.len())
        .map(|k| surrogate_norm(&controls.a[k], &controls.b[k], &problem.ops.mesh))
        .collect()
}

/// `xi(t_k) = exp(-sum_{j<k} f(t_j) dt)`. `second` is the other control
/// pair for the stability weight (defaults to `controls`).
pub fn weight_path(
    kind: WeightKind,
    k: &WeightConstants,
    problem: &Problem,
    traj: &ForwardTrajectory,
    controls: &ControlPair,
    second: Option<&ControlPair>,
) -> WeightProcess {
    let s1 = control_norms(problem, controls);
    let s2 = second
        .map(|c| control_norms(problem, c))
        .unwrap_or_else(|| s1.clone());
    let visc = 1.0 / k.nu + 1.0;
    let f = |j: usize| -> f64 {
        let uv = problem.basis.v_norm(&traj.coeffs[j]).powi(2);
        let f1 = k.c1 * visc * (s1[j].powi(2) + s2[j].powi(2) + uv + 1.0);
        let f2 = k.c2 * visc * (1.0 + uv + s1[j].powi(2));
        match kind {
            WeightKind::Xi0 => k.c0 * (1.0 + s1[j].powi(2)),
            WeightKind::Xi1 => f1,
            WeightKind::Xi2 => f2,
            WeightKind::Beta => 2.0 * f1.max(f2),
        }
    };
    let dt = problem.time.dt;
    let mut acc = 0.0;
    let mut values = Vec::with_capacity(traj.coeffs.len());
    values.push(1.0);
    for j in 0..traj.coeffs.len() - 1 {
        acc += f(j) * dt;
        values.push((-acc).exp());
    }
    let constant = match kind {
        WeightKind::Xi0 => k.c0,
        WeightKind::Xi1 => k.c1,
        WeightKind::Xi2 => k.c2,
        WeightKind::Beta => k.c1.max(k.c2),
    };
    WeightProcess {
        kind,
        constant,
        values,
    }
}

/// Rates entering the exponential moments.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MomentConstants {
    pub nu: f64,
    pub l_bound: f64,
    pub r_star: f64,
    pub c_hat: f64,
    pub t_end: f64,
}

impl MomentConstants {
    pub fn lambda_star(&self, t: f64) -> f64 {
        self.nu * (-self.r_star * t).exp() / self.l_bound
    }
    pub fn a_star(&self) -> f64 {
        self.nu * self.nu * (-2.0 * self.r_star * self.t_end).exp() / (2.0 * self.l_bound)
    }
    pub fn beta_star(&self, t: f64) -> f64 {
        self.nu * (-4.0 * (self.r_star + self.l_bound) * t).exp() / (8.0 * self.l_bound)
    }
    pub fn b_star(&self) -> f64 {
        self.nu * self.nu * (-8.0 * (self.r_star + self.l_bound) * self.t_end).exp()
            / (8.0 * self.l_bound)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentStat {
    pub name: String,
    /// `log E exp(X)`.
    pub log_mean: f64,
    pub mean: f64,
    pub stderr: f64,
    pub max_exponent: f64,
    /// Largest single-sample share of the mean.
    pub max_share: f64,
    pub heavy_tail: bool,
    pub overflow: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentReport {
    pub samples: usize,
    pub stats: Vec<MomentStat>,
}

const EXP_CAP: f64 = 700.0;

fn moment(name: &str, x: &[f64]) -> MomentStat {
    let mx = x.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let overflow = mx > EXP_CAP;
    let capped: Vec<f64> = x.iter().map(|v| v.min(EXP_CAP)).collect();
    let shift = capped.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let scaled: Vec<f64> = capped.iter().map(|v| (v - shift).exp()).collect();
    let tot = neumaier_sum(scaled.iter().copied());
    let est = mean_stderr(&scaled);
    let log_mean = shift + est.mean.ln();
    let max_share = scaled.iter().fold(0.0f64, |a, b| a.max(*b)) / tot;
    MomentStat {
        name: name.into(),
        log_mean,
        mean: log_mean.exp(),
        stderr: est.stderr * shift.exp(),
        max_exponent: mx,
        max_share,
        heavy_tail: x.len() > 1 && max_share > 0.5,
        overflow,
    }
}

pub fn exp_integrability_stats(
    problem: &Problem,
    trajectories: &[ForwardTrajectory],
    k: &MomentConstants,
) -> Result<MomentReport> {
    if trajectories.len() < 64 {
        return Err(Error::Invalid(format!(
            "need at least 64 samples, got {}",
            trajectories.len()
        )));
    }
    if !(k.l_bound > 0.0) {
        return Err(Error::Invalid("exponential moments need L > 0".into()));
    }
    let dt = problem.time.dt;
    let nt = problem.time.steps;
    let t = problem.time.t_end;
    let a_s = k.a_star();
    let b_s = k.b_star();
    let mut e = [vec![], vec![], vec![], vec![]];
    for tr in trajectories {
        let l2: Vec<f64> = tr.coeffs.iter().map(|c| dot(c, c)).collect();
        let vv: Vec<f64> = tr
            .coeffs
            .iter()
            .map(|c| problem.basis.v_norm(c).powi(2))
            .collect();
        e[0].push(k.lambda_star(t) * (-t * k.r_star).exp() * l2[nt]);
        e[1].push(a_s * neumaier_sum((1..=nt).map(|j| dt * vv[j])));
        e[2].push(b_s * neumaier_sum((1..=nt).map(|j| dt * l2[j] * vv[j])));
        e[3].push(b_s / k.c_hat * neumaier_sum((1..=nt).map(|j| dt * l2[j] * l2[j])));
    }
    let names = [
        "terminal_energy",
        "a_star_dissipation",
        "b_star_cross",
        "b_star_quartic",
    ];
    Ok(MomentReport {
        samples: trajectories.len(),
        stats: names.iter().zip(&e).map(|(n, x)| moment(n, x)).collect(),
    })
}
