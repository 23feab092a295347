//! Compensated sums and Monte Carlo summaries.

/// Neumaier-compensated sum of an iterator.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in it {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean and standard error of the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(v: f64) -> Self {
        Self {
            mean: v,
            stderr: 0.0,
        }
    }
}

pub fn mean_stderr(xs: &[f64]) -> Estimate {
    let m = xs.len();
    if m == 0 {
        return Estimate::default();
    }
    let mean = neumaier_sum(xs.iter().copied()) / m as f64;
    if m == 1 {
        return Estimate::exact(mean);
    }
    let var = neumaier_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (m - 1) as f64;
    Estimate {
        mean,
        stderr: (var / m as f64).sqrt(),
    }
}

/// Elementwise compensated mean over a list of equally sized vectors.
pub fn mean_vec(rows: &[Vec<f64>]) -> Vec<f64> {
    if rows.is_empty() {
        return Vec::new();
    }
    let len = rows[0].len();
    let m = rows.len() as f64;
    (0..len)
        .map(|i| neumaier_sum(rows.iter().map(|r| r[i])) / m)
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_beats_naive() {
        let xs = vec![1.0, 1e100, 1.0, -1e100];
        assert_eq!(neumaier_sum(xs), 2.0);
    }

    #[test]
    fn order_independent() {
        let xs: Vec<f64> = (0..10_000)
            .map(|k| ((k as f64) * 0.731).sin() * 1e3)
            .collect();
        let mut ys = xs.clone();
        ys.reverse();
        let a = neumaier_sum(xs.iter().copied());
        let b = neumaier_sum(ys.iter().copied());
        assert!((a - b).abs() <= 1e-13 * a.abs().max(1.0));
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        let e = mean_stderr(&[3.0; 10]);
        assert_eq!(e.mean, 3.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1e-1, 3e-2, 1e-2];
        let y: Vec<f64> = x.iter().map(|v: &f64| 5.0 * v.powi(2)).collect();
        assert!((loglog_slope(&x, &y) - 2.0).abs() < 1e-12);
    }
}
