//! Skew-symmetric convection form `b(w, v, phi)` on the staggered grid.
//!
//! The volume part is `1/2[((w.grad)v, phi) - ((w.grad)phi, v)]`, written as
//! differences between neighbouring same-component faces; the boundary part
//! is `1/2 sum_i w_i (w.n)_i (v.phi)_i` over non-corner boundary nodes. With
//! `w.n = 0` the form is exactly antisymmetric in `(v, phi)`.

use nalgebra::DMatrix;

use super::{DiscreteOperators, GalerkinBasis};

#[derive(Clone, Debug, Default)]
pub struct Trilinear {
    pub w: Vec<u32>,
    pub v: Vec<u32>,
    pub phi: Vec<u32>,
    pub coef: Vec<f64>,
    n_faces: usize,
}

impl Trilinear {
    fn push(&mut self, w: usize, v: usize, phi: usize, c: f64) {
        self.w.push(w as u32);
        self.v.push(v as u32);
        self.phi.push(phi as u32);
        self.coef.push(c);
    }

    pub fn len(&self) -> usize {
        self.coef.len()
    }
    pub fn is_empty(&self) -> bool {
        self.coef.is_empty()
    }
    pub fn n_faces(&self) -> usize {
        self.n_faces
    }

    pub fn assemble(ops: &DiscreteOperators) -> Self {
        let g = &ops.grid;
        let (nx, ny, hx, hy) = (g.nx, g.ny, g.hx, g.hy);
        let mut b = Trilinear {
            n_faces: g.n_faces(),
            ..Default::default()
        };
        let pair = |b: &mut Trilinear, f: usize, gg: usize, transport: [usize; 2], hperp: f64| {
            let k = 0.25 * hperp;
            for t in transport {
                b.push(t, gg, f, k);
                b.push(t, f, gg, -k);
            }
        };
        // u along x, transported by u
        for j in 0..ny {
            for i in 0..nx {
                let (f, h) = (g.xf(i, j), g.xf(i + 1, j));
                pair(&mut b, f, h, [f, h], hy);
            }
        }
        // u along y, transported by v at the shared vertex
        for j in 0..ny - 1 {
            for i in 1..nx {
                let (f, h) = (g.xf(i, j), g.xf(i, j + 1));
                pair(&mut b, f, h, [g.yf(i - 1, j + 1), g.yf(i, j + 1)], hx);
            }
        }
        // v along y, transported by v
        for j in 0..ny {
            for i in 0..nx {
                let (f, h) = (g.yf(i, j), g.yf(i, j + 1));
                pair(&mut b, f, h, [f, h], hx);
            }
        }
        // v along x, transported by u at the shared vertex
        for j in 1..ny {
            for i in 0..nx - 1 {
                let (f, h) = (g.yf(i, j), g.yf(i + 1, j));
                pair(&mut b, f, h, [g.xf(i + 1, j - 1), g.xf(i + 1, j)], hy);
            }
        }
        let mesh = &ops.mesh;
        let nb = mesh.len();
        for (k, nd) in mesh.nodes.iter().enumerate() {
            let Some((tf, _)) = nd.trace else { continue };
            let sp = mesh.segments[(k + nb - 1) % nb];
            let sn = mesh.segments[k];
            let normal = [(sp.face, 0.5 * sp.sign), (sn.face, 0.5 * sn.sign)];
            for &(wf, ws) in &normal {
                let c = 0.5 * nd.weight * ws;
                // tangential part: sign^2 = 1
                b.push(wf, tf, tf, c);
                for &(vf, vs) in &normal {
                    for &(pf, ps) in &normal {
                        b.push(wf, vf, pf, c * vs * ps);
                    }
                }
            }
        }
        b
    }

    pub fn eval(&self, w: &[f64], v: &[f64], phi: &[f64]) -> f64 {
        let mut s = 0.0;
        for t in 0..self.len() {
            s += self.coef[t]
                * w[self.w[t] as usize]
                * v[self.v[t] as usize]
                * phi[self.phi[t] as usize];
        }
        s
    }

    /// Face covector `phi -> b(w, v, phi)`.
    pub fn cov_phi(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_faces];
        for t in 0..self.len() {
            out[self.phi[t] as usize] +=
                self.coef[t] * w[self.w[t] as usize] * v[self.v[t] as usize];
        }
        out
    }

    /// Face covector `w -> b(w, v, phi)`.
    pub fn cov_w(&self, v: &[f64], phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_faces];
        for t in 0..self.len() {
            out[self.w[t] as usize] +=
                self.coef[t] * v[self.v[t] as usize] * phi[self.phi[t] as usize];
        }
        out
    }

    /// Face covector `v -> b(w, v, phi)`.
    pub fn cov_v(&self, w: &[f64], phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_faces];
        for t in 0..self.len() {
            out[self.v[t] as usize] +=
                self.coef[t] * w[self.w[t] as usize] * phi[self.phi[t] as usize];
        }
        out
    }

    /// `R[l][j] = b(w, e_j, e_l)`.
    pub fn contract_w(&self, w: &[f64], basis: &GalerkinBasis) -> DMatrix<f64> {
        let n = basis.n;
        let e = &basis.vectors;
        let mut z = DMatrix::<f64>::zeros(self.n_faces, n);
        for t in 0..self.len() {
            let c = self.coef[t] * w[self.w[t] as usize];
            if c == 0.0 {
                continue;
            }
            let (vf, pf) = (self.v[t] as usize, self.phi[t] as usize);
            for j in 0..n {
                z[(pf, j)] += c * e[(vf, j)];
            }
        }
        e.tr_mul(&z)
    }

    /// `R[l][i] = b(e_i, v, e_l)`.
    pub fn contract_v(&self, v: &[f64], basis: &GalerkinBasis) -> DMatrix<f64> {
        let n = basis.n;
        let e = &basis.vectors;
        let mut z = DMatrix::<f64>::zeros(self.n_faces, n);
        for t in 0..self.len() {
            let c = self.coef[t] * v[self.v[t] as usize];
            if c == 0.0 {
                continue;
            }
            let (wf, pf) = (self.w[t] as usize, self.phi[t] as usize);
            for i in 0..n {
                z[(pf, i)] += c * e[(wf, i)];
            }
        }
        e.tr_mul(&z)
    }

    /// `T[i][(l, j)] = b(e_i, e_j, e_l)`, one n x n matrix per `i`.
    pub fn state_tensor(&self, basis: &GalerkinBasis) -> Vec<DMatrix<f64>> {
        (0..basis.n)
            .map(|i| self.contract_w(&basis.mode(i), basis))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, DomainSpec};
    use crate::operators::{assemble_operators, stokes_eigenbasis};

    fn setup(n: usize) -> (DiscreteOperators, Trilinear) {
        let (g, m) = build_geometry(&DomainSpec::unit(n, n)).unwrap();
        let o = assemble_operators(&g, &m, 0.3, 0.1).unwrap();
        let b = Trilinear::assemble(&o);
        (o, b)
    }

    fn field(nf: usize, s: f64) -> Vec<f64> {
        (0..nf).map(|f| ((f as f64 + 1.0) * s).sin()).collect()
    }

    #[test]
    fn antisymmetric_when_transport_is_tangential() {
        let (o, b) = setup(10);
        let psi: Vec<f64> = (0..o.grid.n_interior_vertices())
            .map(|k| (k as f64 * 0.77).cos())
            .collect();
        let w = super::super::spmv(&o.curl, &psi);
        let v = field(o.n_faces(), 0.37);
        let p = field(o.n_faces(), 1.13);
        let s = b.eval(&w, &v, &p) + b.eval(&w, &p, &v);
        assert!(s.abs() < 1e-13, "{s}");
    }

    #[test]
    fn boundary_energy_flux() {
        // b(w, v, v) = 1/2 sum w_i (w.n)_i |v_i|^2 for any w
        let (o, b) = setup(9);
        let w = field(o.n_faces(), 0.21);
        let mut v = field(o.n_faces(), 0.9);
        for f in 0..o.n_faces() {
            if o.grid.is_wall_face(f) {
                v[f] = 0.0;
            }
        }
        let wn = o.mesh.normal_trace(&w);
        let vt = o.mesh.tangential_trace(&v);
        let flux: f64 = o
            .mesh
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.corner)
            .map(|(k, n)| 0.5 * n.weight * wn[k] * vt[k] * vt[k])
            .sum();
        assert!((b.eval(&w, &v, &v) - flux).abs() < 1e-13);
    }

    #[test]
    fn covectors_agree_with_eval() {
        let (o, b) = setup(8);
        let nf = o.n_faces();
        let (w, v, p) = (field(nf, 0.1), field(nf, 0.2), field(nf, 0.3));
        let e = b.eval(&w, &v, &p);
        let d1: f64 = b.cov_phi(&w, &v).iter().zip(&p).map(|(x, y)| x * y).sum();
        let d2: f64 = b.cov_w(&v, &p).iter().zip(&w).map(|(x, y)| x * y).sum();
        let d3: f64 = b.cov_v(&w, &p).iter().zip(&v).map(|(x, y)| x * y).sum();
        for d in [d1, d2, d3] {
            assert!((d - e).abs() < 1e-12 * e.abs().max(1.0));
        }
    }

    #[test]
    fn contractions_agree_with_eval() {
        let (o, b) = setup(8);
        let basis = stokes_eigenbasis(&o, 5, &o.alpha_nodes()).unwrap();
        let w = field(o.n_faces(), 0.4);
        let rw = b.contract_w(&w, &basis);
        let rv = b.contract_v(&w, &basis);
        for l in 0..5 {
            for j in 0..5 {
                let el = basis.mode(l);
                let ej = basis.mode(j);
                assert!((rw[(l, j)] - b.eval(&w, &ej, &el)).abs() < 1e-12);
                assert!((rv[(l, j)] - b.eval(&ej, &w, &el)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn consistent_with_advection_of_smooth_fields() {
        // w = (1, 0) has w.n = +-1 on the side walls; b(w, v, phi) for smooth v, phi
        // approximates int (w.grad v).phi
        let n = 32;
        let (o, b) = setup(n);
        let w = o.grid.sample(|_, _| [1.0, 0.0]);
        let v = o.grid.sample(|x, _| [x, 0.0]);
        let p = o.grid.sample(|_, _| [1.0, 0.0]);
        // int_O d/dx(x) * 1 = 1
        assert!((b.eval(&w, &v, &p) - 1.0).abs() < 0.1);
    }
}
