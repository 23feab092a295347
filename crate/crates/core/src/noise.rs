//! Noise operators `G = (G^1, .., G^m)` acting on Galerkin coefficients.
//!
//! The damped families use `rho(s) = (1 + s^2)^{-1/2}`:
//!
//! * additive: `G^k(y) = d_k rho(|y|) phi_k`
//! * multiplicative: `G^k(y) = c_k rho(|y|)^2 M_k y + d_k rho(|y|) phi_k`
//!
//! Both satisfy `(1 + |y|^2) |G(y)|^2 <= sum_k (c_k |M_k| + d_k |phi_k|)^2`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::operators::GalerkinBasis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NoiseFamily {
    Zero,
    AdditiveDamped,
    MultiplicativeDamped,
}

/// Configuration-level description of a noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub m: usize,
    /// Target bound `L`.
    pub l_bound: f64,
    /// Fraction of `L` used by `sum_k (c_k |M_k| + d_k |phi_k|)^2`.
    #[serde(default = "default_fill")]
    pub fill: f64,
    /// Relative channel amplitudes before scaling (defaults to ones).
    #[serde(default)]
    pub amplitudes: Option<Vec<f64>>,
    /// Share of each channel budget given to the multiplicative part.
    #[serde(default = "default_split")]
    pub linear_share: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_fill() -> f64 {
    0.9
}
fn default_split() -> f64 {
    0.5
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            family: NoiseFamily::Zero,
            m: 0,
            l_bound: 0.0,
            fill: default_fill(),
            amplitudes: None,
            linear_share: default_split(),
            seed: 0,
        }
    }

    pub fn multiplicative(m: usize, l_bound: f64) -> Self {
        Self {
            family: NoiseFamily::MultiplicativeDamped,
            m,
            l_bound,
            ..Self::zero()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family != NoiseFamily::Zero {
            if self.m == 0 {
                return Err(Error::Config(
                    "noise.m must be positive for a damped family".into(),
                ));
            }
            if !(self.l_bound > 0.0) || !self.l_bound.is_finite() {
                return Err(Error::Config(format!(
                    "noise.l_bound must be > 0, got {}",
                    self.l_bound
                )));
            }
            if !(self.fill > 0.0 && self.fill <= 1.0) {
                return Err(Error::Config(format!(
                    "noise.fill must lie in (0, 1], got {}",
                    self.fill
                )));
            }
            if !(0.0..=1.0).contains(&self.linear_share) {
                return Err(Error::Config(
                    "noise.linear_share must lie in [0, 1]".into(),
                ));
            }
            if let Some(a) = &self.amplitudes {
                if a.len() != self.m || a.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Config(
                        "noise.amplitudes must have m nonnegative entries".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub family: NoiseFamily,
    pub m: usize,
    pub n: usize,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub phi: Vec<DVector<f64>>,
    pub mats: Vec<DMatrix<f64>>,
    pub l_bound: f64,
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().fold(0.0f64, |a, v| a.max(*v))
}

impl NoiseModel {
    pub fn zero(n: usize) -> Self {
        Self {
            family: NoiseFamily::Zero,
            m: 0,
            n,
            c: vec![],
            d: vec![],
            phi: vec![],
            mats: vec![],
            l_bound: 0.0,
        }
    }

    /// Builds the family from a spec in an `n`-dimensional Galerkin space.
    /// Directions `phi_k` are unit vectors, the `M_k` symmetric with unit
    /// spectral norm, and amplitudes are scaled so that the bound budget
    /// equals `fill * L`.
    pub fn from_spec(spec: &NoiseSpec, n: usize) -> Result<Self> {
        spec.validate()?;
        if spec.family == NoiseFamily::Zero {
            return Ok(Self::zero(n));
        }
        let m = spec.m;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f697365);
        let mut phi = Vec::with_capacity(m);
        let mut mats = Vec::with_capacity(m);
        for k in 0..m {
            // smooth directions: weight decays with the mode index
            let mut v = DVector::from_fn(n, |i, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g / (1.0 + i as f64)
            });
            v[k % n] += 1.0;
            let nv = v.norm();
            phi.push(v / nv);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
            let s = (&a + a.transpose()) * 0.5;
            let sn = spectral_norm(&s);
            mats.push(s / sn);
        }
        let amps = spec.amplitudes.clone().unwrap_or_else(|| vec![1.0; m]);
        let share = match spec.family {
            NoiseFamily::AdditiveDamped => 0.0,
            _ => spec.linear_share,
        };
        let raw_c: Vec<f64> = amps.iter().map(|a| a * share).collect();
        let raw_d: Vec<f64> = amps.iter().map(|a| a * (1.0 - share)).collect();
        let mut model = Self {
            family: spec.family,
            m,
            n,
            c: raw_c,
            d: raw_d,
            phi,
            mats,
            l_bound: spec.l_bound,
        };
        let budget = model.budget();
        if budget > 0.0 {
            let kappa = (spec.fill * spec.l_bound / budget).sqrt();
            model.c.iter_mut().for_each(|v| *v *= kappa);
            model.d.iter_mut().for_each(|v| *v *= kappa);
        }
        Ok(model)
    }

    /// `sum_k (c_k |M_k| + d_k |phi_k|)^2`.
    pub fn budget(&self) -> f64 {
        (0..self.m)
            .map(|k| {
                let lin = if self.family == NoiseFamily::MultiplicativeDamped {
                    self.c[k] * spectral_norm(&self.mats[k])
                } else {
                    0.0
                };
                (lin + self.d[k] * self.phi[k].norm()).powi(2)
            })
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.family == NoiseFamily::Zero || self.m == 0
    }

    fn lin(&self) -> bool {
        self.family == NoiseFamily::MultiplicativeDamped
    }

    /// Channels `G^k(t, y)`; the families are autonomous.
    pub fn evaluate_g(&self, _t: f64, y: &[f64]) -> Vec<Vec<f64>> {
        if self.is_zero() {
            return vec![];
        }
        let yv = DVector::from_column_slice(y);
        let s2 = yv.norm_squared();
        let rho = 1.0 / (1.0 + s2).sqrt();
        (0..self.m)
            .map(|k| {
                let mut g = &self.phi[k] * (self.d[k] * rho);
                if self.lin() {
                    g += &self.mats[k] * &yv * (self.c[k] * rho * rho);
                }
                g.as_slice().to_vec()
            })
            .collect()
    }

    /// `sum_k G^k(y) dw_k`.
    pub fn apply(&self, y: &[f64], dw: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (g, w) in self.evaluate_g(0.0, y).iter().zip(dw) {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v * w;
            }
        }
        out
    }

    pub fn apply_g_jacobian(&self, _t: f64, y: &[f64], v: &[f64]) -> Vec<Vec<f64>> {
        if self.is_zero() {
            return vec![];
        }
        let yv = DVector::from_column_slice(y);
        let vv = DVector::from_column_slice(v);
        let s2 = yv.norm_squared();
        let q = 1.0 + s2;
        let yv_dot = yv.dot(&vv);
        (0..self.m)
            .map(|k| {
                let mut g = &self.phi[k] * (-self.d[k] * yv_dot * q.powf(-1.5));
                if self.lin() {
                    let my = &self.mats[k] * &yv;
                    let mv = &self.mats[k] * &vv;
                    g += (mv / q - my * (2.0 * yv_dot / (q * q))) * self.c[k];
                }
                g.as_slice().to_vec()
            })
            .collect()
    }

    pub fn apply_g_jacobian_adjoint(&self, _t: f64, y: &[f64], q: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = y.len();
        if self.is_zero() {
            return Ok(vec![0.0; n]);
        }
        check_len("adjoint channels", self.m, q.len())?;
        let yv = DVector::from_column_slice(y);
        let s2 = yv.norm_squared();
        let qq = 1.0 + s2;
        let mut out = DVector::zeros(n);
        for (k, qk) in q.iter().enumerate() {
            check_len("adjoint channel", n, qk.len())?;
            let qv = DVector::from_column_slice(qk);
            out -= &yv * (self.d[k] * self.phi[k].dot(&qv) * qq.powf(-1.5));
            if self.lin() {
                let mtq = self.mats[k].tr_mul(&qv);
                let my = &self.mats[k] * &yv;
                out += (mtq / qq - &yv * (2.0 * my.dot(&qv) / (qq * qq))) * self.c[k];
            }
        }
        Ok(out.as_slice().to_vec())
    }

    /// `sum_k (grad G^k(y) v) dw_k`.
    pub fn jac_sum(&self, y: &[f64], v: &[f64], dw: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (g, w) in self.apply_g_jacobian(0.0, y, v).iter().zip(dw) {
            for (o, x) in out.iter_mut().zip(g) {
                *o += x * w;
            }
        }
        out
    }

    /// `sum_k grad G^k(y)^T (mu dw_k)`.
    pub fn jac_adj_sum(&self, y: &[f64], mu: &[f64], dw: &[f64]) -> Vec<f64> {
        if self.is_zero() {
            return vec![0.0; y.len()];
        }
        let q: Vec<Vec<f64>> = dw
            .iter()
            .map(|w| mu.iter().map(|x| x * w).collect())
            .collect();
        self.apply_g_jacobian_adjoint(0.0, y, &q)
            .expect("channel count")
    }

    /// Stacked Jacobian, `(m n) x n`.
    pub fn jacobian_matrix(&self, y: &[f64]) -> DMatrix<f64> {
        let n = y.len();
        let mut j = DMatrix::zeros(self.m * n, n);
        for c in 0..n {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            for (k, g) in self.apply_g_jacobian(0.0, y, &e).iter().enumerate() {
                for (r, v) in g.iter().enumerate() {
                    j[(k * n + r, c)] = *v;
                }
            }
        }
        j
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseAssumptionReport {
    pub k_est: f64,
    pub l_est: f64,
    pub l_bound: f64,
    /// Jacobian operator norm in the coefficient l2 norm.
    pub jacobian_bound_h: f64,
    /// Jacobian operator norm in the V norm `sqrt(sum lambda_k c_k^2)`.
    pub jacobian_bound_v: f64,
    pub frechet_remainder_slope: f64,
    /// Worst relative defect of the Jacobian adjoint identity.
    pub adjoint_defect: f64,
    pub samples: usize,
}

fn random_point(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let nv: f64 = v.norm();
    v * (radius / nv)
}

fn log_uniform_radius(rng: &mut ChaCha8Rng) -> f64 {
    10f64.powf(rng.gen_range(-3.0..3.0))
}

pub fn validate_assumptions(
    model: &NoiseModel,
    basis: &GalerkinBasis,
    samples: usize,
    seed: u64,
) -> Result<NoiseAssumptionReport> {
    if samples < 100 {
        return Err(Error::Invalid(format!(
            "need at least 100 samples, got {samples}"
        )));
    }
    let n = basis.n;
    if model.n != n {
        return Err(Error::Mismatch(format!(
            "noise model has dimension {}, basis has {}",
            model.n, n
        )));
    }
    let mut rep = NoiseAssumptionReport {
        k_est: 0.0,
        l_est: 0.0,
        l_bound: model.l_bound,
        jacobian_bound_h: 0.0,
        jacobian_bound_v: 0.0,
        frechet_remainder_slope: f64::NAN,
        adjoint_defect: 0.0,
        samples,
    };
    if model.is_zero() {
        rep.frechet_remainder_slope = f64::INFINITY;
        return Ok(rep);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gnorm = |y: &DVector<f64>| -> f64 {
        model
            .evaluate_g(0.0, y.as_slice())
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
    };
    let diff = |y: &DVector<f64>, z: &DVector<f64>| -> f64 {
        let gy = model.evaluate_g(0.0, y.as_slice());
        let gz = model.evaluate_g(0.0, z.as_slice());
        gy.iter()
            .zip(&gz)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };
    let sq_l: Vec<f64> = basis.eigenvalues.iter().map(|l| l.sqrt()).collect();
    for s in 0..samples {
        let r = log_uniform_radius(&mut rng);
        let y = random_point(&mut rng, n, r);
        let l = (1.0 + y.norm_squared()) * gnorm(&y);
        if l > rep.l_est {
            rep.l_est = l;
        }
        if l > model.l_bound * (1.0 + 1e-6) {
            return Err(Error::Assumption(format!(
                "(1+|y|^2)|G(y)|^2 = {l:e} exceeds L = {:e} at sample {s}, |y| = {:e}",
                model.l_bound,
                y.norm()
            )));
        }
        // far and near pairs for the Lipschitz quotient
        let r = log_uniform_radius(&mut rng);
        let z_far = random_point(&mut rng, n, r);
        let dz = random_point(&mut rng, n, 1e-4 * (1.0 + y.norm()));
        let z_near = &y + dz;
        for z in [z_far, z_near] {
            let d = (&y - &z).norm();
            if d > 0.0 {
                rep.k_est = rep.k_est.max(diff(&y, &z) / d);
            }
        }
        if s % 4 == 0 {
            let j = model.jacobian_matrix(y.as_slice());
            rep.jacobian_bound_h = rep.jacobian_bound_h.max(spectral_norm(&j));
            let mut jv = j.clone();
            for r in 0..j.nrows() {
                for c in 0..n {
                    jv[(r, c)] = j[(r, c)] * sq_l[r % n] / sq_l[c];
                }
            }
            rep.jacobian_bound_v = rep.jacobian_bound_v.max(spectral_norm(&jv));
        }
    }
    // adjoint identity
    for _ in 0..100 {
        let r = log_uniform_radius(&mut rng);
        let y = random_point(&mut rng, n, r);
        let v = random_point(&mut rng, n, 1.0);
        let q: Vec<Vec<f64>> = (0..model.m)
            .map(|_| random_point(&mut rng, n, 1.0).as_slice().to_vec())
            .collect();
        let jv = model.apply_g_jacobian(0.0, y.as_slice(), v.as_slice());
        let lhs: f64 = jv
            .iter()
            .zip(&q)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        let jt = model.apply_g_jacobian_adjoint(0.0, y.as_slice(), &q)?;
        let rhs: f64 = jt.iter().zip(v.iter()).map(|(x, y)| x * y).sum();
        let scale = lhs.abs().max(rhs.abs()).max(1e-300);
        rep.adjoint_defect = rep.adjoint_defect.max((lhs - rhs).abs() / scale);
    }
    // Frechet remainder |G(y + eps v) - G(y) - eps grad G v| ~ eps^2
    let eps = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
    let mut slopes = Vec::new();
    for _ in 0..16 {
        let r = rng.gen_range(0.3..3.0);
        let y = random_point(&mut rng, n, r);
        let v = random_point(&mut rng, n, 1.0);
        let jv = model.apply_g_jacobian(0.0, y.as_slice(), v.as_slice());
        let g0 = model.evaluate_g(0.0, y.as_slice());
        let rem: Vec<f64> = eps
            .iter()
            .map(|&e| {
                let ge = model.evaluate_g(0.0, (&y + &v * e).as_slice());
                ge.iter()
                    .zip(&g0)
                    .zip(&jv)
                    .map(|((a, b), d)| {
                        a.iter()
                            .zip(b)
                            .zip(d)
                            .map(|((x, y), z)| (x - y - e * z).powi(2))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        if rem.iter().all(|r| *r > 0.0) {
            slopes.push(crate::stats::loglog_slope(&eps, &rem));
        }
    }
    slopes.sort_by(f64::total_cmp);
    rep.frechet_remainder_slope = slopes.get(slopes.len() / 2).copied().unwrap_or(f64::NAN);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(family: NoiseFamily, n: usize) -> NoiseModel {
        let spec = NoiseSpec {
            family,
            m: 3,
            l_bound: 0.5,
            ..NoiseSpec::zero()
        };
        NoiseModel::from_spec(&spec, n).unwrap()
    }

    #[test]
    fn zero_family() {
        let z = NoiseModel::zero(4);
        assert!(z.evaluate_g(0.0, &[1.0; 4]).is_empty());
        assert_eq!(z.apply(&[1.0; 4], &[]), vec![0.0; 4]);
        assert_eq!(
            z.apply_g_jacobian_adjoint(0.0, &[1.0; 4], &[]).unwrap(),
            vec![0.0; 4]
        );
    }

    #[test]
    fn origin_values() {
        let m = model(NoiseFamily::MultiplicativeDamped, 5);
        let g = m.evaluate_g(0.0, &[0.0; 5]);
        for k in 0..3 {
            for i in 0..5 {
                assert!((g[k][i] - m.d[k] * m.phi[k][i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn additive_derivative_vanishes_at_origin() {
        let m = model(NoiseFamily::AdditiveDamped, 5);
        let j = m.apply_g_jacobian(0.0, &[0.0; 5], &[1.0, -2.0, 0.5, 0.0, 3.0]);
        assert!(j.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn budget_is_scaled() {
        let m = model(NoiseFamily::MultiplicativeDamped, 6);
        assert!((m.budget() - 0.9 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn symmetric_adjoint_at_origin() {
        let m = model(NoiseFamily::MultiplicativeDamped, 4);
        let q: Vec<Vec<f64>> = (0..3)
            .map(|k| vec![k as f64 + 1.0, -1.0, 0.5, 2.0])
            .collect();
        let got = m.apply_g_jacobian_adjoint(0.0, &[0.0; 4], &q).unwrap();
        let mut want = DVector::zeros(4);
        for k in 0..3 {
            want += &m.mats[k] * DVector::from_column_slice(&q[k]) * m.c[k];
        }
        for i in 0..4 {
            assert!((got[i] - want[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn finite_difference_slope_one() {
        let m = model(NoiseFamily::MultiplicativeDamped, 5);
        let y = [0.3, -0.7, 1.1, 0.2, -0.4];
        let v = [0.5, 0.1, -0.3, 0.9, 0.2];
        let jv = m.apply_g_jacobian(0.0, &y, &v);
        let g0 = m.evaluate_g(0.0, &y);
        let eps = [1e-3, 1e-4, 1e-5];
        let errs: Vec<f64> = eps
            .iter()
            .map(|&e| {
                let ye: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a + e * b).collect();
                let ge = m.evaluate_g(0.0, &ye);
                let mut s = 0.0;
                for k in 0..3 {
                    for i in 0..5 {
                        s += ((ge[k][i] - g0[k][i]) / e - jv[k][i]).powi(2);
                    }
                }
                s.sqrt()
            })
            .collect();
        let slope = crate::stats::loglog_slope(&eps, &errs);
        assert!((slope - 1.0).abs() < 0.1, "{slope}");
    }

    #[test]
    fn spec_validation() {
        let mut s = NoiseSpec::multiplicative(2, 0.0);
        assert!(s.validate().is_err());
        s.l_bound = 1.0;
        s.amplitudes = Some(vec![1.0]);
        assert!(s.validate().is_err());
        assert!(NoiseSpec::zero().validate().is_ok());
    }
}
