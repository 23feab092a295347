//! Unit-square domain, MAC staggered grid and the boundary mesh.
//!
//! Velocity lives on cell faces: `u` on x-faces `(i, j)` with `i in 0..=nx`,
//! `j in 0..ny`, and `v` on y-faces `(i, j)` with `i in 0..nx`, `j in 0..=ny`.
//! All face fields share one flat index space, x-faces first.
//!
//! Boundary nodes are the grid vertices on the boundary, ordered
//! counterclockwise from the origin. Normal data attached to the nodes is
//! treated as piecewise linear along each edge, so the flux through a wall
//! face is the mean of its two end-node values.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "one")]
    pub lx: f64,
    #[serde(default = "one")]
    pub ly: f64,
}

fn one() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn unit(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            lx: 1.0,
            ly: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 {
            return Err(Error::Domain(format!(
                "grid {}x{} too coarse for the slip stencil (need >= 8)",
                self.nx, self.ny
            )));
        }
        if !(self.lx > 0.0 && self.ly > 0.0) || !self.lx.is_finite() || !self.ly.is_finite() {
            return Err(Error::Domain(format!(
                "side lengths must be positive, got {} x {}",
                self.lx, self.ly
            )));
        }
        Ok(())
    }
}

/// Which side of the square a boundary node or wall face sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub lx: f64,
    pub ly: f64,
    pub cell_centers: Vec<[f64; 2]>,
    pub xface_centers: Vec<[f64; 2]>,
    pub yface_centers: Vec<[f64; 2]>,
}

impl Grid {
    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }
    pub fn n_xfaces(&self) -> usize {
        (self.nx + 1) * self.ny
    }
    pub fn n_yfaces(&self) -> usize {
        self.nx * (self.ny + 1)
    }
    pub fn n_faces(&self) -> usize {
        self.n_xfaces() + self.n_yfaces()
    }
    #[inline]
    pub fn xf(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }
    #[inline]
    pub fn yf(&self, i: usize, j: usize) -> usize {
        self.n_xfaces() + j * self.nx + i
    }
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
    /// Interior vertex `(i, j)` with `1 <= i < nx`, `1 <= j < ny`.
    #[inline]
    pub fn ivert(&self, i: usize, j: usize) -> usize {
        (j - 1) * (self.nx - 1) + (i - 1)
    }
    pub fn n_interior_vertices(&self) -> usize {
        (self.nx - 1) * (self.ny - 1)
    }

    /// True for faces whose normal is the wall normal (x-faces on the left
    /// and right walls, y-faces on bottom and top).
    pub fn is_wall_face(&self, f: usize) -> bool {
        if f < self.n_xfaces() {
            let i = f % (self.nx + 1);
            i == 0 || i == self.nx
        } else {
            let j = (f - self.n_xfaces()) / self.nx;
            j == 0 || j == self.ny
        }
    }

    /// Quadrature weight of each face in the discrete L2(O) inner product.
    /// Wall faces carry half a cell.
    pub fn face_mass(&self) -> Vec<f64> {
        let a = self.cell_area();
        (0..self.n_faces())
            .map(|f| if self.is_wall_face(f) { 0.5 * a } else { a })
            .collect()
    }

    pub fn face_center(&self, f: usize) -> [f64; 2] {
        if f < self.n_xfaces() {
            self.xface_centers[f]
        } else {
            self.yface_centers[f - self.n_xfaces()]
        }
    }

    /// Samples a velocity field `(x, y) -> (u, v)` at face centers.
    pub fn sample<F: Fn(f64, f64) -> [f64; 2]>(&self, field: F) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_faces());
        for p in &self.xface_centers {
            out.push(field(p[0], p[1])[0]);
        }
        for p in &self.yface_centers {
            out.push(field(p[0], p[1])[1]);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BoundaryNode {
    pub pos: [f64; 2],
    /// Arclength from the origin, counterclockwise.
    pub s: f64,
    pub weight: f64,
    pub normal: [f64; 2],
    pub tangent: [f64; 2],
    pub corner: bool,
    pub side: Side,
    /// Face carrying the tangential trace and the sign mapping face value to
    /// `y . tau`. `None` at corners.
    pub trace: Option<(usize, f64)>,
}

/// Wall segment between node `k` and node `k + 1`.
#[derive(Clone, Copy, Debug)]
pub struct WallSegment {
    pub face: usize,
    /// Face value times `sign` is the outward normal velocity.
    pub sign: f64,
    pub length: f64,
}

#[derive(Clone, Debug)]
pub struct BoundaryMesh {
    pub nodes: Vec<BoundaryNode>,
    pub segments: Vec<WallSegment>,
    pub perimeter: f64,
}

impl BoundaryMesh {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn weights(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.weight).collect()
    }
    pub fn corner_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.nodes[k].corner).collect()
    }

    /// Wall-face values realizing nodal normal data `a` (outward normal
    /// velocity), as `(face, value)` pairs.
    pub fn normal_faces(&self, a: &[f64]) -> Vec<(usize, f64)> {
        let n = self.len();
        self.segments
            .iter()
            .enumerate()
            .map(|(k, seg)| {
                let mean = 0.5 * (a[k] + a[(k + 1) % n]);
                (seg.face, seg.sign * mean)
            })
            .collect()
    }

    /// Tangential trace `y . tau` at every node (zero at corners).
    pub fn tangential_trace(&self, y: &[f64]) -> Vec<f64> {
        self.nodes
            .iter()
            .map(|nd| nd.trace.map_or(0.0, |(f, s)| s * y[f]))
            .collect()
    }

    /// Outward normal velocity at every node, from the adjacent wall faces.
    pub fn normal_trace(&self, y: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|k| {
                let prev = self.segments[(k + n - 1) % n];
                let next = self.segments[k];
                0.5 * (prev.sign * y[prev.face] + next.sign * y[next.face])
            })
            .collect()
    }
}

pub fn build_geometry(spec: &DomainSpec) -> Result<(Grid, BoundaryMesh)> {
    spec.validate()?;
    let (nx, ny) = (spec.nx, spec.ny);
    let hx = spec.lx / nx as f64;
    let hy = spec.ly / ny as f64;
    let mut cell_centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            cell_centers.push([(i as f64 + 0.5) * hx, (j as f64 + 0.5) * hy]);
        }
    }
    let mut xface_centers = Vec::with_capacity((nx + 1) * ny);
    for j in 0..ny {
        for i in 0..=nx {
            xface_centers.push([i as f64 * hx, (j as f64 + 0.5) * hy]);
        }
    }
    let mut yface_centers = Vec::with_capacity(nx * (ny + 1));
    for j in 0..=ny {
        for i in 0..nx {
            yface_centers.push([(i as f64 + 0.5) * hx, j as f64 * hy]);
        }
    }
    let grid = Grid {
        nx,
        ny,
        hx,
        hy,
        lx: spec.lx,
        ly: spec.ly,
        cell_centers,
        xface_centers,
        yface_centers,
    };

    // vertex coordinates and side of every node, counterclockwise
    let mut verts: Vec<(usize, usize, Side)> = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        verts.push((i, 0, Side::Bottom));
    }
    for j in 0..ny {
        verts.push((nx, j, Side::Right));
    }
    for t in 0..nx {
        verts.push((nx - t, ny, Side::Top));
    }
    for t in 0..ny {
        verts.push((0, ny - t, Side::Left));
    }
    let nb = verts.len();

    let mut segments = Vec::with_capacity(nb);
    for &(i, j, side) in &verts {
        let seg = match side {
            Side::Bottom => WallSegment {
                face: grid.yf(i, 0),
                sign: -1.0,
                length: hx,
            },
            Side::Right => WallSegment {
                face: grid.xf(nx, j),
                sign: 1.0,
                length: hy,
            },
            Side::Top => WallSegment {
                face: grid.yf(i - 1, ny),
                sign: 1.0,
                length: hx,
            },
            Side::Left => WallSegment {
                face: grid.xf(0, j - 1),
                sign: -1.0,
                length: hy,
            },
        };
        segments.push(seg);
    }

    let normal_of = |side: Side| -> [f64; 2] {
        match side {
            Side::Bottom => [0.0, -1.0],
            Side::Right => [1.0, 0.0],
            Side::Top => [0.0, 1.0],
            Side::Left => [-1.0, 0.0],
        }
    };
    let rot = |n: [f64; 2]| [-n[1], n[0]];

    let mut nodes = Vec::with_capacity(nb);
    let mut s = 0.0;
    for k in 0..nb {
        let (i, j, side) = verts[k];
        let prev_side = verts[(k + nb - 1) % nb].2;
        let corner = prev_side != side;
        let weight = 0.5 * (segments[(k + nb - 1) % nb].length + segments[k].length);
        let normal = if corner {
            let (a, b) = (normal_of(prev_side), normal_of(side));
            let m = [a[0] + b[0], a[1] + b[1]];
            let r = (m[0] * m[0] + m[1] * m[1]).sqrt();
            [m[0] / r, m[1] / r]
        } else {
            normal_of(side)
        };
        let trace = if corner {
            None
        } else {
            Some(match side {
                Side::Bottom => (grid.xf(i, 0), 1.0),
                Side::Right => (grid.yf(nx - 1, j), 1.0),
                Side::Top => (grid.xf(i, ny - 1), -1.0),
                Side::Left => (grid.yf(0, j), -1.0),
            })
        };
        nodes.push(BoundaryNode {
            pos: [i as f64 * hx, j as f64 * hy],
            s,
            weight,
            normal,
            tangent: rot(normal),
            corner,
            side,
            trace,
        });
        s += segments[k].length;
    }
    let perimeter = segments.iter().map(|g| g.length).sum();
    Ok((
        grid,
        BoundaryMesh {
            nodes,
            segments,
            perimeter,
        },
    ))
}

/// Trapezoidal arclength quadrature `sum_i values_i w_i`.
pub fn boundary_integral(values: &[f64], mesh: &BoundaryMesh) -> Result<f64> {
    check_len("boundary values", mesh.len(), values.len())?;
    Ok(crate::stats::neumaier_sum(
        values.iter().zip(&mesh.nodes).map(|(v, n)| v * n.weight),
    ))
}

/// Removes the weighted mean so that the boundary integral vanishes.
pub fn enforce_compatibility(a: &[f64], mesh: &BoundaryMesh) -> Result<Vec<f64>> {
    let mean = boundary_integral(a, mesh)? / mesh.perimeter;
    Ok(a.iter().map(|v| v - mean).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> (Grid, BoundaryMesh) {
        build_geometry(&DomainSpec::unit(n, n)).unwrap()
    }

    #[test]
    fn perimeter_and_counts() {
        let (_, mesh) = unit(8);
        assert!((mesh.weights().iter().sum::<f64>() - 4.0).abs() < 1e-12);
        let (g, _) = build_geometry(&DomainSpec::unit(16, 32)).unwrap();
        assert_eq!(g.n_xfaces(), 544);
        assert_eq!(g.n_yfaces(), 16 * 33);
        assert_eq!(g.n_cells(), 512);
    }

    #[test]
    fn rejects_coarse_grid() {
        assert!(build_geometry(&DomainSpec::unit(7, 8)).is_err());
        let bad = DomainSpec {
            nx: 8,
            ny: 8,
            lx: -1.0,
            ly: 1.0,
        };
        assert!(build_geometry(&bad).is_err());
    }

    #[test]
    fn frames_are_orthonormal() {
        let (_, mesh) = unit(32);
        for n in &mesh.nodes {
            let dot = n.normal[0] * n.tangent[0] + n.normal[1] * n.tangent[1];
            assert_eq!(dot, 0.0);
            let nn = (n.normal[0].powi(2) + n.normal[1].powi(2)).sqrt();
            assert!((nn - 1.0).abs() < 1e-15);
        }
        assert_eq!(mesh.corner_indices(), vec![0, 32, 64, 96]);
    }

    #[test]
    fn counterclockwise_circulation_closes() {
        let (_, mesh) = unit(12);
        let n = mesh.len();
        let mut p = mesh.nodes[0].pos;
        for k in 0..n {
            let q = mesh.nodes[(k + 1) % n].pos;
            let d = [q[0] - p[0], q[1] - p[1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            // step direction agrees with the tangent of the segment's side
            let t = mesh.nodes[(k + 1) % n].tangent;
            if !mesh.nodes[(k + 1) % n].corner {
                assert!((d[0] * t[0] + d[1] * t[1] - len).abs() < 1e-14);
            }
            p = q;
        }
        assert_eq!(p, mesh.nodes[0].pos);
    }

    #[test]
    fn integrals() {
        let (_, mesh) = unit(8);
        let ones = vec![1.0; mesh.len()];
        assert!((boundary_integral(&ones, &mesh).unwrap() - 4.0).abs() < 1e-14);
        let lr: Vec<f64> = mesh
            .nodes
            .iter()
            .map(|n| match (n.side, n.corner) {
                (Side::Left, false) => 1.0,
                (Side::Right, false) => -1.0,
                _ => 0.0,
            })
            .collect();
        assert!(boundary_integral(&lr, &mesh).unwrap().abs() < 1e-15);
        assert!(boundary_integral(&ones[1..], &mesh).is_err());
    }

    #[test]
    fn periodic_sine_integrates_to_zero() {
        let (_, mesh) = unit(16);
        let p = mesh.perimeter;
        let vals: Vec<f64> = mesh
            .nodes
            .iter()
            .map(|n| (2.0 * std::f64::consts::PI * n.s / p).sin())
            .collect();
        assert!(boundary_integral(&vals, &mesh).unwrap().abs() < 1e-10);
    }

    #[test]
    fn piecewise_linear_exactness() {
        // f(s) = s on the bottom edge only (piecewise linear, zero elsewhere
        // except the ramp down on the first right-edge segment)
        let (_, mesh) = unit(10);
        let vals: Vec<f64> = mesh
            .nodes
            .iter()
            .map(|n| {
                if n.side == Side::Bottom || n.pos == [1.0, 0.0] {
                    n.pos[0]
                } else {
                    0.0
                }
            })
            .collect();
        // exact: int_0^1 x dx + ramp from 1 to 0 over one segment of length 0.1
        let exact = 0.5 + 0.05;
        assert!((boundary_integral(&vals, &mesh).unwrap() - exact).abs() < 1e-14);
    }

    #[test]
    fn compatibility() {
        let (_, mesh) = unit(8);
        let c = enforce_compatibility(&vec![1.0; mesh.len()], &mesh).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-15));
        let r: Vec<f64> = (0..mesh.len())
            .map(|k| ((k * 7919) % 13) as f64 - 4.0)
            .collect();
        let c1 = enforce_compatibility(&r, &mesh).unwrap();
        assert!(boundary_integral(&c1, &mesh).unwrap().abs() < 1e-14);
        let c2 = enforce_compatibility(&c1, &mesh).unwrap();
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn normal_faces_carry_flux() {
        let (g, mesh) = unit(8);
        let r: Vec<f64> = (0..mesh.len()).map(|k| (k as f64 * 0.37).sin()).collect();
        let a = enforce_compatibility(&r, &mesh).unwrap();
        let mut y = vec![0.0; g.n_faces()];
        for (f, v) in mesh.normal_faces(&a) {
            y[f] = v;
        }
        let flux: f64 = mesh
            .segments
            .iter()
            .map(|s| s.sign * y[s.face] * s.length)
            .sum();
        assert!(flux.abs() < 1e-14);
    }
}
