//! Stationary Stokes lifting of non-homogeneous slip data.
//!
//! Finds `A` with `div A = 0`, `A.n = a` on the wall faces and
//! `(A, phi)_V = sum_i w_i b_i (phi.tau)_i` for every divergence-free `phi`
//! with zero normal trace. The pressure is recovered afterwards by least
//! squares.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{dense, field_norms, spmv, spmv_t, DiscreteOperators};
use crate::error::{check_len, Error, Result};
use crate::geometry::{boundary_integral, enforce_compatibility};

#[derive(Clone, Debug, serde::Serialize)]
pub struct LiftingField {
    pub velocity: Vec<f64>,
    /// Cell pressure, zero mean.
    pub pressure: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Relative interior momentum residual.
    pub interior_residual: f64,
    /// Relative mismatch of wall-face fluxes against the nodal data.
    pub normal_mismatch: f64,
    /// Relative mismatch of the slip relation at the tangential trace faces.
    pub slip_mismatch: f64,
    pub divergence: f64,
    /// `||A||_{H1} / (||a|| + ||d_s a|| + ||b||)`, logged only.
    pub c_est: f64,
}

/// Factorizations reused across lifts.
pub struct LiftingSolver {
    poisson: Cholesky<f64, Dyn>,
    stokes: Cholesky<f64, Dyn>,
}

fn chol(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
}

impl LiftingSolver {
    pub fn new(ops: &DiscreteOperators) -> Result<Self> {
        let nc = ops.grid.n_cells();
        // Div_I Div_I^T, with Div_I the divergence restricted to interior faces
        let grad = dense(&ops.grad);
        let div = dense(&ops.div);
        let lap = -(&div * &grad);
        let diag = lap.diagonal().max();
        let shift = DMatrix::from_element(nc, nc, diag / nc as f64);
        let poisson = chol(&lap + &shift, "pressure Laplacian")?;
        let r = &ops.curl;
        let q = dense(&(&r.transpose() * &(&ops.gram_v * r)));
        let stokes = chol(q, "reduced Stokes matrix")?;
        Ok(Self { poisson, stokes })
    }

    /// Lifted velocity for compatible `a` (checked) and any `b`.
    pub fn lift(&self, ops: &DiscreteOperators, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let mesh = &ops.mesh;
        check_len("normal data", mesh.len(), a.len())?;
        check_len("slip data", mesh.len(), b.len())?;
        let flux = boundary_integral(a, mesh)?;
        let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs())) * mesh.perimeter;
        if flux.abs() > 1e-10 * scale {
            return Err(Error::Incompatible(flux));
        }
        let a = enforce_compatibility(a, mesh)?;
        Ok(self.lift_unchecked(ops, &a, b))
    }

    pub(crate) fn lift_unchecked(&self, ops: &DiscreteOperators, a: &[f64], b: &[f64]) -> Vec<f64> {
        let nf = ops.n_faces();
        let mut y = vec![0.0; nf];
        for (f, v) in ops.mesh.normal_faces(a) {
            y[f] = v;
        }
        if a.iter().any(|v| *v != 0.0) {
            let rhs = DVector::from_vec(spmv(&ops.div, &y));
            let phi = self.poisson.solve(&rhs);
            let gphi = spmv(&ops.grad, phi.as_slice());
            for (yf, g) in y.iter_mut().zip(&gphi) {
                *yf += g;
            }
        }
        // rhs = R^T (T^T b - K y)
        let mut src = spmv(&ops.gram_v, &y);
        src.iter_mut().for_each(|v| *v = -*v);
        for (nd, bi) in ops.mesh.nodes.iter().zip(b) {
            if let Some((f, s)) = nd.trace {
                src[f] += nd.weight * bi * s;
            }
        }
        let rhs = DVector::from_vec(spmv_t(&ops.curl, &src));
        let psi = self.stokes.solve(&rhs);
        let rpsi = spmv(&ops.curl, psi.as_slice());
        for (yf, v) in y.iter_mut().zip(&rpsi) {
            *yf += v;
        }
        y
    }

    /// Momentum residual `K A - T^T b` on faces.
    pub fn residual(&self, ops: &DiscreteOperators, velocity: &[f64], b: &[f64]) -> Vec<f64> {
        let mut r = spmv(&ops.gram_v, velocity);
        for (nd, bi) in ops.mesh.nodes.iter().zip(b) {
            if let Some((f, s)) = nd.trace {
                r[f] -= nd.weight * bi * s;
            }
        }
        r
    }

    /// Least-squares pressure so that the interior residual is a pressure
    /// gradient. Returned per unit cell area, zero mean.
    pub fn pressure(&self, ops: &DiscreteOperators, residual: &[f64]) -> Vec<f64> {
        let mut ri = residual.to_vec();
        for (f, v) in ri.iter_mut().enumerate() {
            if ops.grid.is_wall_face(f) {
                *v = 0.0;
            }
        }
        // r_I = Div_I^T pi'  =>  (Div_I Div_I^T) pi' = Div_I r_I
        let rhs = DVector::from_vec(spmv(&ops.div, &ri));
        let p = self.poisson.solve(&rhs);
        let area = ops.grid.cell_area();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        p.iter().map(|v| (v - mean) / area).collect()
    }

    pub fn solve(&self, ops: &DiscreteOperators, a: &[f64], b: &[f64]) -> Result<LiftingField> {
        let velocity = self.lift(ops, a, b)?;
        Ok(self.diagnose(ops, a, b, velocity))
    }

    pub fn diagnose(
        &self,
        ops: &DiscreteOperators,
        a: &[f64],
        b: &[f64],
        velocity: Vec<f64>,
    ) -> LiftingField {
        let mesh = &ops.mesh;
        let res = self.residual(ops, &velocity, b);
        let pressure = self.pressure(ops, &res);
        let area = ops.grid.cell_area();
        // r - Div_I^T pi' on interior faces
        let dtp = spmv_t(
            &ops.div,
            &pressure.iter().map(|p| p * area).collect::<Vec<_>>(),
        );
        let kv = spmv(&ops.gram_v, &velocity);
        let scale_k = kv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut trace_face = vec![None; ops.n_faces()];
        for (k, nd) in mesh.nodes.iter().enumerate() {
            if let Some((f, _)) = nd.trace {
                trace_face[f] = Some(k);
            }
        }
        let mut interior = 0.0f64;
        let mut slip = 0.0f64;
        let mut slip_scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for f in 0..ops.n_faces() {
            if ops.grid.is_wall_face(f) {
                continue;
            }
            let d = res[f] - dtp[f];
            match trace_face[f] {
                Some(k) => {
                    let w = mesh.nodes[k].weight;
                    slip = slip.max((d / w).abs());
                    slip_scale = slip_scale.max((kv[f] / w).abs());
                }
                None => interior = interior.max(d.abs()),
            }
        }
        let interior_residual = if scale_k > 0.0 {
            interior / scale_k
        } else {
            interior
        };
        let slip_mismatch = if slip_scale > 0.0 {
            slip / slip_scale
        } else {
            slip
        };

        let amax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ac = enforce_compatibility(a, mesh).unwrap_or_else(|_| a.to_vec());
        let normal = mesh
            .normal_faces(&ac)
            .iter()
            .map(|&(f, v)| (velocity[f] - v).abs())
            .fold(0.0f64, f64::max);
        let normal_mismatch = if amax > 0.0 { normal / amax } else { normal };

        let nm = field_norms(ops, &velocity);
        let h1 = (nm.l2 * nm.l2 + nm.grad * nm.grad).sqrt();
        let surrogate = surrogate_norm(a, b, mesh);
        let c_est = if surrogate > 0.0 { h1 / surrogate } else { 0.0 };
        LiftingField {
            divergence: ops.div_norm(&velocity),
            velocity,
            pressure,
            a: a.to_vec(),
            b: b.to_vec(),
            interior_residual,
            normal_mismatch,
            slip_mismatch,
            c_est,
        }
    }
}

/// `||a||_{L2} + ||d_s a||_{L2} + ||b||_{L2}` on the boundary, arclength
/// derivative by centered differences.
pub fn surrogate_norm(a: &[f64], b: &[f64], mesh: &crate::geometry::BoundaryMesh) -> f64 {
    let n = mesh.len();
    let l2 = |v: &[f64]| -> f64 {
        v.iter()
            .zip(&mesh.nodes)
            .map(|(x, nd)| x * x * nd.weight)
            .sum::<f64>()
            .sqrt()
    };
    let ds: Vec<f64> = (0..n)
        .map(|k| {
            let lp = mesh.segments[(k + n - 1) % n].length;
            let ln = mesh.segments[k].length;
            (a[(k + 1) % n] - a[(k + n - 1) % n]) / (lp + ln)
        })
        .collect();
    l2(a) + l2(&ds) + l2(b)
}

pub fn solve_lifting(a: &[f64], b: &[f64], ops: &DiscreteOperators) -> Result<LiftingField> {
    LiftingSolver::new(ops)?.solve(ops, a, b)
}

/// Lifts of unit boundary data: columns `0..nb` lift the compatibility
/// correction of the unit normal datum at node `k`, columns `nb..2nb` the
/// unit slip datum.
pub fn unit_lifts(ops: &DiscreteOperators, solver: &LiftingSolver) -> DMatrix<f64> {
    let mesh = &ops.mesh;
    let nb = mesh.len();
    let mut out = DMatrix::zeros(ops.n_faces(), 2 * nb);
    let zero = vec![0.0; nb];
    for k in 0..nb {
        let mut e = vec![0.0; nb];
        e[k] = 1.0;
        let ec = enforce_compatibility(&e, mesh).expect("length");
        let col = solver.lift_unchecked(ops, &ec, &zero);
        out.set_column(k, &DVector::from_vec(col));
        let col = solver.lift_unchecked(ops, &zero, &e);
        out.set_column(nb + k, &DVector::from_vec(col));
    }
    out
}

/// Weak-form slip residual of a field against boundary data, tested with
/// `phi`: `(A, phi)_V - sum w_i b_i (phi.tau)_i`.
pub fn weak_slip_residual(
    ops: &DiscreteOperators,
    velocity: &[f64],
    b: &[f64],
    phi: &[f64],
) -> f64 {
    let tr = spmv(&ops.trace, phi);
    let bnd: f64 = ops
        .mesh
        .nodes
        .iter()
        .zip(b)
        .zip(&tr)
        .map(|((nd, bi), t)| nd.weight * bi * t)
        .sum();
    ops.v_inner(velocity, phi) - bnd
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, DomainSpec, Side};
    use crate::operators::{assemble_operators, stokes_eigenbasis};

    fn ops(n: usize, alpha: f64) -> DiscreteOperators {
        let (g, m) = build_geometry(&DomainSpec::unit(n, n)).unwrap();
        assemble_operators(&g, &m, alpha, 0.1).unwrap()
    }

    #[test]
    fn homogeneous_data_gives_zero() {
        let o = ops(8, 0.5);
        let nb = o.mesh.len();
        let l = solve_lifting(&vec![0.0; nb], &vec![0.0; nb], &o).unwrap();
        assert!(l.velocity.iter().all(|v| *v == 0.0));
        assert!(l.pressure.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn constant_slip_datum() {
        let o = ops(16, 1.0);
        let nb = o.mesh.len();
        let l = solve_lifting(&vec![0.0; nb], &vec![0.7; nb], &o).unwrap();
        assert!(l.velocity.iter().any(|v| v.abs() > 1e-3));
        assert!(l.slip_mismatch < 1e-8, "{}", l.slip_mismatch);
        assert!(l.interior_residual < 1e-8);
        assert!(l.divergence < 1e-10);
    }

    #[test]
    fn inflow_profile() {
        let o = ops(16, 0.5);
        let raw: Vec<f64> = o
            .mesh
            .nodes
            .iter()
            .map(|n| match n.side {
                Side::Left => -(std::f64::consts::PI * n.pos[1]).sin(),
                _ => 0.0,
            })
            .collect();
        let a = enforce_compatibility(&raw, &o.mesh).unwrap();
        let l = solve_lifting(&a, &vec![0.0; a.len()], &o).unwrap();
        assert!(l.normal_mismatch < 1e-8);
        assert!(l.divergence < 1e-10);
        assert!(l.interior_residual < 1e-8);
        assert!(l.c_est.is_finite() && l.c_est > 0.0);
    }

    #[test]
    fn rejects_incompatible() {
        let o = ops(8, 0.5);
        let nb = o.mesh.len();
        assert!(matches!(
            solve_lifting(&vec![1.0; nb], &vec![0.0; nb], &o),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn weak_slip_identity_holds_against_basis() {
        let o = ops(12, 0.8);
        let basis = stokes_eigenbasis(&o, 6, &o.alpha_nodes()).unwrap();
        let nb = o.mesh.len();
        let a = enforce_compatibility(
            &(0..nb).map(|k| (k as f64 * 0.4).sin()).collect::<Vec<_>>(),
            &o.mesh,
        )
        .unwrap();
        let b: Vec<f64> = (0..nb).map(|k| (k as f64 * 0.9).cos()).collect();
        let l = solve_lifting(&a, &b, &o).unwrap();
        for k in 0..6 {
            let r = weak_slip_residual(&o, &l.velocity, &b, &basis.mode(k));
            assert!(r.abs() < 1e-10, "{r}");
        }
    }

    #[test]
    fn unit_lifts_superpose() {
        let o = ops(8, 0.8);
        let s = LiftingSolver::new(&o).unwrap();
        let u = unit_lifts(&o, &s);
        let nb = o.mesh.len();
        let a = enforce_compatibility(
            &(0..nb).map(|k| (k as f64 * 0.4).sin()).collect::<Vec<_>>(),
            &o.mesh,
        )
        .unwrap();
        let b: Vec<f64> = (0..nb).map(|k| (k as f64 * 0.9).cos()).collect();
        let direct = s.lift(&o, &a, &b).unwrap();
        let mut theta = a.clone();
        theta.extend_from_slice(&b);
        let sup = &u * DVector::from_vec(theta);
        for (x, y) in direct.iter().zip(sup.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
