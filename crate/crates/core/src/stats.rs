//! Small statistics toolkit: sample moments, least squares, Kolmogorov–Smirnov, jackknife.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Jackknife standard error of `stat` computed from per-replica rows of sufficient sums.
///
/// `rows[r]` holds replica `r`'s additive contributions; `stat` maps summed
/// rows (and the replica count) to the estimate.
pub fn jackknife_se<F>(rows: &[Vec<f64>], stat: F) -> f64
where
    F: Fn(&[f64], usize) -> f64,
{
    let r = rows.len();
    if r < 2 {
        return f64::NAN;
    }
    let width = rows[0].len();
    let mut total = vec![0.0; width];
    for row in rows {
        total.iter_mut().zip(row).for_each(|(t, v)| *t += v);
    }
    let mut leave = vec![0.0; width];
    let estimates: Vec<f64> = rows
        .iter()
        .map(|row| {
            leave.iter_mut().zip(&total).zip(row).for_each(|((l, t), v)| *l = t - v);
            stat(&leave, r - 1)
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / r as f64;
    let ss: f64 = estimates.iter().map(|e| (e - mean).powi(2)).sum();
    ((r as f64 - 1.0) / r as f64 * ss).sqrt()
}

/// Ordinary least squares fit `y ≈ Σ_i c_i φ_i(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
    /// Standard errors of the coefficients from the residual variance.
    pub std_errors: Vec<f64>,
}

/// Least squares with design rows `design[k] = (φ_0(x_k), φ_1(x_k), …)`.
pub fn least_squares(design: &[Vec<f64>], y: &[f64]) -> Result<LeastSquares> {
    let m = design.len();
    let p = design.first().map_or(0, |r| r.len());
    if m != y.len() || m <= p || p == 0 {
        return Err(Error::degenerate(format!("least squares with {m} points and {p} parameters")));
    }
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for (row, &yk) in design.iter().zip(y) {
        for i in 0..p {
            b[i] += row[i] * yk;
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
        }
    }
    let inv = invert(a)?;
    let coefficients: Vec<f64> = (0..p).map(|i| (0..p).map(|j| inv[i][j] * b[j]).sum()).collect();
    let fitted: Vec<f64> = design.iter().map(|row| row.iter().zip(&coefficients).map(|(x, c)| x * c).sum()).collect();
    let ybar = y.iter().sum::<f64>() / m as f64;
    let ss_res: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - ybar).powi(2)).sum();
    let sigma2 = ss_res / (m - p) as f64;
    let std_errors = (0..p).map(|i| (sigma2 * inv[i][i]).sqrt()).collect();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LeastSquares { coefficients, r_squared, std_errors })
}

fn invert(mut a: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let p = a.len();
    let mut inv: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::degenerate("singular normal equations"));
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let d = a[col][col];
        for j in 0..p {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for i in 0..p {
            if i != col {
                let f = a[i][col];
                for j in 0..p {
                    a[i][j] -= f * a[col][j];
                    inv[i][j] -= f * inv[col][j];
                }
            }
        }
    }
    Ok(inv)
}

/// Straight-line fit `y = a + b x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LeastSquares> {
    let design: Vec<Vec<f64>> = x.iter().map(|&v| vec![1.0, v]).collect();
    least_squares(&design, y)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided Kolmogorov–Smirnov distance between the sample and `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of the KS distance `d` for `n` samples (Stephens' correction).
pub fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn exact_line_and_quadratic() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let fit = linear_fit(&x, &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let design: Vec<Vec<f64>> = x.iter().map(|&v| vec![1.0, v, v * v]).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 - v + 0.25 * v * v).collect();
        let q = least_squares(&design, &y).unwrap();
        assert!((q.coefficients[2] - 0.25).abs() < 1e-12);
        assert!(least_squares(&design[..3], &y[..3]).is_err());
    }

    #[test]
    fn jackknife_of_mean_is_classical_se() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0];
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let se = jackknife_se(&rows, |s, r| s[0] / r as f64);
        assert!((se - mean_se(&xs).1).abs() < 1e-12);
    }

    #[test]
    fn ks_of_constant_sample() {
        let d = ks_statistic(&[0.0; 500], normal_cdf);
        assert!((d - 0.5).abs() < 1e-12);
        assert!(kolmogorov_p(d, 500) < 1e-10);
        assert!((normal_cdf(1.0) - 0.841344746).abs() < 1e-9);
        // Critical value at the 5% level is about 1.36/sqrt(n).
        assert!((kolmogorov_p(1.358 / (1000f64).sqrt(), 1000) - 0.05).abs() < 0.005);
    }
}
