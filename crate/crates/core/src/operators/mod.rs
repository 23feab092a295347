//! Discrete operators on the staggered grid, the slip-Stokes eigenbasis and
//! the stationary Stokes lifting of boundary data.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::geometry::{BoundaryMesh, Grid};

pub mod convection;
pub mod lifting;

pub use convection::Trilinear;
pub use lifting::{solve_lifting, LiftingField, LiftingSolver};

/// `y = A x` for a CSR matrix.
pub fn spmv(a: &CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    a.row_iter()
        .map(|row| {
            row.col_indices()
                .iter()
                .zip(row.values())
                .map(|(&c, v)| v * x[c])
                .sum()
        })
        .collect()
}

/// `y = A^T x` for a CSR matrix.
pub fn spmv_t(a: &CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.ncols()];
    for (r, row) in a.row_iter().enumerate() {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        for (&c, v) in row.col_indices().iter().zip(row.values()) {
            y[c] += v * xr;
        }
    }
    y
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn mdot(m: &[f64], a: &[f64], b: &[f64]) -> f64 {
    m.iter().zip(a).zip(b).map(|((w, x), y)| w * x * y).sum()
}

fn csr(rows: usize, cols: usize, trip: &[(usize, usize, f64)]) -> CsrMatrix<f64> {
    let mut coo = CooMatrix::new(rows, cols);
    for &(r, c, v) in trip {
        coo.push(r, c, v);
    }
    CsrMatrix::from(&coo)
}

#[derive(Clone, Debug)]
pub struct DiscreteOperators {
    pub grid: Grid,
    pub mesh: BoundaryMesh,
    pub alpha: f64,
    pub nu: f64,
    /// Face mass weights.
    pub mass: Vec<f64>,
    /// Cells x faces.
    pub div: CsrMatrix<f64>,
    /// Faces x cells, zero rows on wall faces.
    pub grad: CsrMatrix<f64>,
    pub d11: CsrMatrix<f64>,
    pub d22: CsrMatrix<f64>,
    /// Shear strain at interior vertices.
    pub d12: CsrMatrix<f64>,
    /// `du/dy` and `dv/dx` at interior vertices.
    pub uy: CsrMatrix<f64>,
    pub vx: CsrMatrix<f64>,
    /// Boundary nodes x faces: tangential trace.
    pub trace: CsrMatrix<f64>,
    /// Strain part of the V-Gram matrix (no boundary term).
    pub strain_gram: CsrMatrix<f64>,
    /// Full V-Gram matrix with slip coefficient `alpha`.
    pub gram_v: CsrMatrix<f64>,
    /// Discrete streamfunction curl: interior vertices -> faces.
    pub curl: CsrMatrix<f64>,
}

pub fn assemble_operators(
    grid: &Grid,
    mesh: &BoundaryMesh,
    alpha: f64,
    nu: f64,
) -> Result<DiscreteOperators> {
    if !(grid.hx > 0.0 && grid.hy > 0.0) {
        return Err(Error::Singular("zero cell area".into()));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Invalid(format!(
            "slip coefficient {alpha} must be >= 0"
        )));
    }
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::Invalid(format!("viscosity {nu} must be > 0")));
    }
    let (nx, ny, hx, hy) = (grid.nx, grid.ny, grid.hx, grid.hy);
    let nf = grid.n_faces();
    let nc = grid.n_cells();
    let nv = grid.n_interior_vertices();

    let mut t = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let c = grid.cell(i, j);
            t.push((c, grid.xf(i + 1, j), 1.0 / hx));
            t.push((c, grid.xf(i, j), -1.0 / hx));
            t.push((c, grid.yf(i, j + 1), 1.0 / hy));
            t.push((c, grid.yf(i, j), -1.0 / hy));
        }
    }
    let div = csr(nc, nf, &t);

    t.clear();
    for j in 0..ny {
        for i in 1..nx {
            let f = grid.xf(i, j);
            t.push((f, grid.cell(i, j), 1.0 / hx));
            t.push((f, grid.cell(i - 1, j), -1.0 / hx));
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            let f = grid.yf(i, j);
            t.push((f, grid.cell(i, j), 1.0 / hy));
            t.push((f, grid.cell(i, j - 1), -1.0 / hy));
        }
    }
    let grad = csr(nf, nc, &t);

    let mut t11 = Vec::new();
    let mut t22 = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let c = grid.cell(i, j);
            t11.push((c, grid.xf(i + 1, j), 1.0 / hx));
            t11.push((c, grid.xf(i, j), -1.0 / hx));
            t22.push((c, grid.yf(i, j + 1), 1.0 / hy));
            t22.push((c, grid.yf(i, j), -1.0 / hy));
        }
    }
    let d11 = csr(nc, nf, &t11);
    let d22 = csr(nc, nf, &t22);

    let mut tuy = Vec::new();
    let mut tvx = Vec::new();
    let mut t12 = Vec::new();
    let mut tcurl = Vec::new();
    for j in 1..ny {
        for i in 1..nx {
            let v = grid.ivert(i, j);
            tuy.push((v, grid.xf(i, j), 1.0 / hy));
            tuy.push((v, grid.xf(i, j - 1), -1.0 / hy));
            tvx.push((v, grid.yf(i, j), 1.0 / hx));
            tvx.push((v, grid.yf(i - 1, j), -1.0 / hx));
            // psi at vertex (i,j): u = dpsi/dy, v = -dpsi/dx
            tcurl.push((grid.xf(i, j - 1), v, 1.0 / hy));
            tcurl.push((grid.xf(i, j), v, -1.0 / hy));
            tcurl.push((grid.yf(i - 1, j), v, -1.0 / hx));
            tcurl.push((grid.yf(i, j), v, 1.0 / hx));
        }
    }
    for &(r, c, val) in tuy.iter().chain(&tvx) {
        t12.push((r, c, 0.5 * val));
    }
    let uy = csr(nv, nf, &tuy);
    let vx = csr(nv, nf, &tvx);
    let d12 = csr(nv, nf, &t12);
    let curl = csr(nf, nv, &tcurl);

    let trace_trip: Vec<(usize, usize, f64)> = mesh
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(k, nd)| nd.trace.map(|(f, s)| (k, f, s)))
        .collect();
    let trace = csr(mesh.len(), nf, &trace_trip);

    let area = grid.cell_area();
    let g11 = &d11.transpose() * &d11;
    let g22 = &d22.transpose() * &d22;
    let g12 = &d12.transpose() * &d12;
    let strain_gram = (&(&g11 + &g22) * (2.0 * area)) + (g12 * (4.0 * area));

    let mut ops = DiscreteOperators {
        grid: grid.clone(),
        mesh: mesh.clone(),
        alpha,
        nu,
        mass: grid.face_mass(),
        div,
        grad,
        d11,
        d22,
        d12,
        uy,
        vx,
        trace,
        strain_gram: strain_gram.clone(),
        gram_v: strain_gram,
        curl,
    };
    ops.gram_v = ops.gram_with(&vec![alpha; mesh.len()]);
    Ok(ops)
}

impl DiscreteOperators {
    pub fn n_faces(&self) -> usize {
        self.grid.n_faces()
    }

    pub fn alpha_nodes(&self) -> Vec<f64> {
        vec![self.alpha; self.mesh.len()]
    }

    /// V-Gram matrix with a per-node boundary coefficient.
    pub fn gram_with(&self, coeff: &[f64]) -> CsrMatrix<f64> {
        let trip: Vec<(usize, usize, f64)> = self
            .mesh
            .nodes
            .iter()
            .zip(coeff)
            .filter_map(|(nd, &b)| nd.trace.map(|(f, _)| (f, f, nd.weight * b)))
            .collect();
        let slip = csr(self.n_faces(), self.n_faces(), &trip);
        &self.strain_gram + &slip
    }

    pub fn mass_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        mdot(&self.mass, u, v)
    }

    pub fn v_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        dot(&spmv(&self.gram_v, u), v)
    }

    /// Rate-of-strain squared norm `||D u||^2`.
    pub fn strain_norm_sq(&self, u: &[f64]) -> f64 {
        let a = self.grid.cell_area();
        let s11 = spmv(&self.d11, u);
        let s22 = spmv(&self.d22, u);
        let s12 = spmv(&self.d12, u);
        a * (dot(&s11, &s11) + dot(&s22, &s22) + 2.0 * dot(&s12, &s12))
    }

    /// `||grad u||^2` from one-sided differences.
    pub fn grad_norm_sq(&self, u: &[f64]) -> f64 {
        let a = self.grid.cell_area();
        let s11 = spmv(&self.d11, u);
        let s22 = spmv(&self.d22, u);
        let uy = spmv(&self.uy, u);
        let vx = spmv(&self.vx, u);
        a * (dot(&s11, &s11) + dot(&s22, &s22) + dot(&uy, &uy) + dot(&vx, &vx))
    }

    /// Velocity interpolated to cell centers.
    pub fn cell_velocity(&self, u: &[f64]) -> Vec<[f64; 2]> {
        let g = &self.grid;
        let mut out = Vec::with_capacity(g.n_cells());
        for j in 0..g.ny {
            for i in 0..g.nx {
                out.push([
                    0.5 * (u[g.xf(i, j)] + u[g.xf(i + 1, j)]),
                    0.5 * (u[g.yf(i, j)] + u[g.yf(i, j + 1)]),
                ]);
            }
        }
        out
    }

    pub fn divergence(&self, u: &[f64]) -> Vec<f64> {
        spmv(&self.div, u)
    }

    /// Discrete L2 norm of the divergence.
    pub fn div_norm(&self, u: &[f64]) -> f64 {
        let d = self.divergence(u);
        (self.grid.cell_area() * dot(&d, &d)).sqrt()
    }
}

/// Discrete slip-Stokes eigenpairs, mass-orthonormal.
#[derive(Clone, Debug)]
pub struct GalerkinBasis {
    pub n: usize,
    pub eigenvalues: Vec<f64>,
    /// Faces x n.
    pub vectors: DMatrix<f64>,
    /// n x faces: `E^T M`.
    pub projector: DMatrix<f64>,
    pub boundary_coeff: Vec<f64>,
    /// Set when the coefficient differs from the state slip coefficient.
    pub adjoint_variant: bool,
}

impl GalerkinBasis {
    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
    pub fn mode(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k).iter().copied().collect()
    }
    /// `sqrt(sum lambda_k c_k^2)`.
    pub fn v_norm(&self, c: &[f64]) -> f64 {
        c.iter()
            .zip(&self.eigenvalues)
            .map(|(x, l)| l * x * x)
            .sum::<f64>()
            .sqrt()
    }
}

pub fn stokes_eigenbasis(
    ops: &DiscreteOperators,
    n: usize,
    boundary_coeff: &[f64],
) -> Result<GalerkinBasis> {
    check_len("boundary coefficient", ops.mesh.len(), boundary_coeff.len())?;
    if let Some((k, b)) = boundary_coeff
        .iter()
        .enumerate()
        .find(|(_, b)| !(**b >= 0.0) || !b.is_finite())
    {
        return Err(Error::Invalid(format!(
            "boundary coefficient must be >= 0, node {k} has {b}"
        )));
    }
    let dim = ops.grid.n_interior_vertices();
    if n == 0 || n > dim {
        return Err(Error::Invalid(format!(
            "requested {n} modes, constrained subspace has dimension {dim}"
        )));
    }
    let kmat = ops.gram_with(boundary_coeff);
    let r = &ops.curl;
    let rt = r.transpose();
    let a = dense(&(&rt * &(&kmat * r)));
    let mdiag = {
        let trip: Vec<(usize, usize, f64)> = ops
            .mass
            .iter()
            .enumerate()
            .map(|(i, &w)| (i, i, w))
            .collect();
        csr(ops.n_faces(), ops.n_faces(), &trip)
    };
    let b = dense(&(&rt * &(&mdiag * r)));

    let chol = b
        .cholesky()
        .ok_or_else(|| Error::Eigen("mass matrix on the constrained subspace is not SPD".into()))?;
    let l = chol.l();
    // C = L^{-1} A L^{-T}
    let y = l
        .solve_lower_triangular(&a)
        .ok_or_else(|| Error::Eigen("triangular solve failed".into()))?;
    let c = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::Eigen("triangular solve failed".into()))?;
    let c = (&c + &c.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(c, 1e-14, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let lt = l.transpose();
    let mut vals = Vec::with_capacity(n);
    let mut vecs = DMatrix::zeros(ops.n_faces(), n);
    for (k, &idx) in order.iter().take(n).enumerate() {
        let lam = eig.eigenvalues[idx];
        if !(lam > 0.0) {
            return Err(Error::Eigen(format!("non-positive eigenvalue {lam:e}")));
        }
        let w: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let x = lt
            .solve_upper_triangular(&w)
            .ok_or_else(|| Error::Eigen("back substitution failed".into()))?;
        let mut e = spmv(r, x.as_slice());
        let peak = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(first) = e.iter().find(|v| v.abs() > 1e-8 * peak) {
            if *first < 0.0 {
                e.iter_mut().for_each(|v| *v = -*v);
            }
        }
        vals.push(lam);
        vecs.set_column(k, &DVector::from_vec(e));
    }
    let mut projector = vecs.transpose();
    for (f, w) in ops.mass.iter().enumerate() {
        projector.column_mut(f).scale_mut(*w);
    }
    let adjoint_variant = boundary_coeff.iter().any(|&b| b != ops.alpha);
    Ok(GalerkinBasis {
        n,
        eigenvalues: vals,
        vectors: vecs,
        projector,
        boundary_coeff: boundary_coeff.to_vec(),
        adjoint_variant,
    })
}

fn dense(a: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (r, row) in a.row_iter().enumerate() {
        for (&c, v) in row.col_indices().iter().zip(row.values()) {
            d[(r, c)] += v;
        }
    }
    d
}

pub fn project_to_basis(field: &[f64], basis: &GalerkinBasis) -> Result<Vec<f64>> {
    check_len("face field", basis.projector.ncols(), field.len())?;
    Ok((0..basis.n)
        .map(|k| dot(basis.projector.row(k).transpose().as_slice(), field))
        .collect())
}

pub fn reconstruct(coeffs: &[f64], basis: &GalerkinBasis) -> Result<Vec<f64>> {
    check_len("coefficients", basis.n, coeffs.len())?;
    let c = DVector::from_column_slice(coeffs);
    Ok((&basis.vectors * c).as_slice().to_vec())
}

/// Orthonormality defects of the basis: `max |E^T M E - I|` and
/// `max |E^T K E - Lambda| / lambda_max`, plus the largest mode divergence.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct GramDefects {
    pub mass: f64,
    pub stiffness: f64,
    pub divergence: f64,
}

pub fn gram_defects(basis: &GalerkinBasis, ops: &DiscreteOperators) -> GramDefects {
    let n = basis.n;
    let e = &basis.vectors;
    let mut me = e.clone();
    for (f, w) in ops.mass.iter().enumerate() {
        me.row_mut(f).scale_mut(*w);
    }
    let gm = e.tr_mul(&me);
    let mut ke = DMatrix::zeros(e.nrows(), n);
    for k in 0..n {
        let col = spmv(&ops.gram_v, e.column(k).as_slice());
        ke.set_column(k, &DVector::from_vec(col));
    }
    let gk = e.tr_mul(&ke);
    let lmax = basis
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-300);
    let mut out = GramDefects {
        mass: 0.0,
        stiffness: 0.0,
        divergence: 0.0,
    };
    for i in 0..n {
        for j in 0..n {
            let d = if i == j { 1.0 } else { 0.0 };
            out.mass = out.mass.max((gm[(i, j)] - d).abs());
            out.stiffness = out
                .stiffness
                .max((gk[(i, j)] - d * basis.eigenvalues[i]).abs() / lmax);
        }
        out.divergence = out.divergence.max(ops.div_norm(&basis.mode(i)));
    }
    out
}

/// Ratios of the discrete functional inequalities over random span fields.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct InequalityReport {
    /// `||v||_4 / (||v||_2^{1/2} ||grad v||_2^{1/2})`.
    pub ladyzhenskaya: f64,
    /// `||v||_{L2(boundary)} / (||v||_2^{1/2} ||grad v||_2^{1/2})`.
    pub trace: f64,
    /// `||v||_{H1} / ||v||_V`.
    pub korn: f64,
    /// `||v||_2^4 / (||v||_2^2 ||v||_V^2)`.
    pub c_hat: f64,
    pub samples: usize,
}

pub struct FieldNorms {
    pub l2: f64,
    pub l4: f64,
    pub grad: f64,
    pub v: f64,
    pub boundary: f64,
}

pub fn field_norms(ops: &DiscreteOperators, u: &[f64]) -> FieldNorms {
    let area = ops.grid.cell_area();
    let l4 = ops
        .cell_velocity(u)
        .iter()
        .map(|p| {
            let s = p[0] * p[0] + p[1] * p[1];
            s * s * area
        })
        .sum::<f64>()
        .powf(0.25);
    let tr = spmv(&ops.trace, u);
    let boundary = tr
        .iter()
        .zip(&ops.mesh.nodes)
        .map(|(t, nd)| t * t * nd.weight)
        .sum::<f64>()
        .sqrt();
    FieldNorms {
        l2: ops.mass_inner(u, u).sqrt(),
        l4,
        grad: ops.grad_norm_sq(u).sqrt(),
        v: ops.v_inner(u, u).max(0.0).sqrt(),
        boundary,
    }
}

pub fn inequality_constants(basis: &GalerkinBasis, ops: &DiscreteOperators) -> InequalityReport {
    inequality_constants_sampled(basis, ops, 1000, 0x5eed)
}

pub fn inequality_constants_sampled(
    basis: &GalerkinBasis,
    ops: &DiscreteOperators,
    samples: usize,
    seed: u64,
) -> InequalityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = InequalityReport {
        ladyzhenskaya: 0.0,
        trace: 0.0,
        korn: 0.0,
        c_hat: 0.0,
        samples: samples + basis.n,
    };
    let mut eval = |c: &[f64]| {
        let u = reconstruct(c, basis).expect("coefficient length");
        let nm = field_norms(ops, &u);
        let mid = (nm.l2 * nm.grad).sqrt();
        rep.ladyzhenskaya = rep.ladyzhenskaya.max(nm.l4 / mid);
        rep.trace = rep.trace.max(nm.boundary / mid);
        rep.korn = rep
            .korn
            .max((nm.l2 * nm.l2 + nm.grad * nm.grad).sqrt() / nm.v);
        let vn = basis.v_norm(c);
        let l2sq: f64 = c.iter().map(|x| x * x).sum();
        rep.c_hat = rep.c_hat.max(l2sq / (vn * vn));
    };
    for k in 0..basis.n {
        let mut c = vec![0.0; basis.n];
        c[k] = 1.0;
        eval(&c);
    }
    for _ in 0..samples {
        let c: Vec<f64> = (0..basis.n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        eval(&c);
    }
    rep
}
