//! Independent reference computations used by the test suites.
//!
//! Nothing here may depend on the network or training modules; these are the
//! yardsticks the rest of the crate is measured against.

use crate::{Error, Result};

/// Central-difference gradient of a scalar function.
///
/// `f` must evaluate finitely near `point`; `h` defaults to 1e-5 via
/// [`finite_diff_gradient_default`].
pub fn finite_diff_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut grad = vec![0.0; point.len()];
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { context: format!("finite difference at coordinate {i}"), step: None });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

pub fn finite_diff_gradient_default(f: &mut dyn FnMut(&[f64]) -> f64, point: &[f64]) -> Result<Vec<f64>> {
    finite_diff_gradient(f, point, 1e-5)
}

/// Exact posterior of `z` for the linear-Gaussian model
/// `y = W z + b + noise`, `z ~ N(0, sigma_z^2 I)`, `noise ~ N(0, sigma_eps^2 I)`.
///
/// Returns the posterior mean and full covariance,
/// `cov = (I/sigma_z^2 + W^T W/sigma_eps^2)^-1`, `mean = cov W^T (y-b)/sigma_eps^2`.
pub struct LinearGaussianPosterior {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance.
    pub cov: Vec<f64>,
    pub dim: usize,
}

pub fn linear_gaussian_posterior(
    w: &[Vec<f64>],
    b: &[f64],
    y: &[f64],
    sigma_z: f64,
    sigma_eps: f64,
) -> Result<LinearGaussianPosterior> {
    if sigma_z <= 0.0 || sigma_eps <= 0.0 {
        return Err(Error::Config("linear_gaussian_posterior: sigmas must be positive".into()));
    }
    let dy = w.len();
    if dy == 0 || b.len() != dy || y.len() != dy {
        return Err(Error::Config("linear_gaussian_posterior: inconsistent output dims".into()));
    }
    let d = w[0].len();
    if w.iter().any(|row| row.len() != d) {
        return Err(Error::Config("linear_gaussian_posterior: ragged W".into()));
    }
    let inv_sz2 = 1.0 / (sigma_z * sigma_z);
    let inv_se2 = 1.0 / (sigma_eps * sigma_eps);

    // precision = I/sigma_z^2 + W^T W / sigma_eps^2
    let mut precision = vec![0.0; d * d];
    for i in 0..d {
        precision[i * d + i] = inv_sz2;
        for j in 0..d {
            let mut acc = 0.0;
            for row in w {
                acc += row[i] * row[j];
            }
            precision[i * d + j] += inv_se2 * acc;
        }
    }
    // rhs = W^T (y - b) / sigma_eps^2
    let mut rhs = vec![0.0; d];
    for i in 0..d {
        for (k, row) in w.iter().enumerate() {
            rhs[i] += row[i] * (y[k] - b[k]);
        }
        rhs[i] *= inv_se2;
    }

    let chol = cholesky(&precision, d)
        .ok_or_else(|| Error::Config("linear_gaussian_posterior: precision not SPD".into()))?;
    let mean = chol_solve(&chol, d, &rhs);
    // cov = precision^-1, column by column.
    let mut cov = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e.fill(0.0);
        e[j] = 1.0;
        let col = chol_solve(&chol, d, &e);
        for i in 0..d {
            cov[i * d + j] = col[i];
        }
    }
    Ok(LinearGaussianPosterior { mean, cov, dim: d })
}

/// Lower-triangular Cholesky factor of a row-major SPD matrix, or None.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    // Solve L y = b, then L^T x = y.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Stationary per-dimension variance of the discrete chain
/// `z' = (1 - delta/sigma_z^2) z + sqrt(2 delta) e`, the Langevin iteration on
/// a pure Gaussian energy. Solves `v = v (1 - delta/sigma_z^2)^2 + 2 delta`.
pub fn discrete_langevin_variance(sigma_z: f64, delta: f64) -> Result<f64> {
    let sz2 = sigma_z * sigma_z;
    if !(delta > 0.0 && delta < 2.0 * sz2) {
        return Err(Error::Config(format!(
            "discrete_langevin_variance: step size {delta} outside the stable range (0, {})",
            2.0 * sz2
        )));
    }
    Ok(sz2 / (1.0 - delta / (2.0 * sz2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Stream};

    #[test]
    fn finite_diff_of_squared_norm() {
        let v = [0.3, -1.2, 2.0];
        let g = finite_diff_gradient_default(&mut |x| x.iter().map(|v| v * v).sum(), &v).unwrap();
        for (gi, vi) in g.iter().zip(v.iter()) {
            assert!((gi - 2.0 * vi).abs() < 1e-8, "{gi} vs {}", 2.0 * vi);
        }
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let g = finite_diff_gradient_default(&mut |_| 3.5, &[1.0, 2.0]).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn finite_diff_of_sin_product() {
        // f(x) = sin(x1) * x2 at (0, 3) -> (3, 0)
        let g = finite_diff_gradient_default(&mut |x| x[0].sin() * x[1], &[0.0, 3.0]).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!(g[1].abs() < 1e-8);
    }

    #[test]
    fn finite_diff_rejects_non_finite() {
        let err = finite_diff_gradient_default(&mut |x| x[0].ln(), &[0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn zero_map_posterior_is_prior() {
        let post = linear_gaussian_posterior(
            &[vec![0.0, 0.0], vec![0.0, 0.0]],
            &[0.0, 0.0],
            &[1.0, -2.0],
            1.5,
            1.0,
        )
        .unwrap();
        assert!(post.mean.iter().all(|&m| m.abs() < 1e-12));
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.5 * 1.5 } else { 0.0 };
                assert!((post.cov[i * 2 + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_map_posterior() {
        // W = I, b = 0, sigmas = 1: cov = I/2, mean = y/2.
        let post = linear_gaussian_posterior(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.0, 0.0],
            &[0.8, -0.4],
            1.0,
            1.0,
        )
        .unwrap();
        assert!((post.mean[0] - 0.4).abs() < 1e-12);
        assert!((post.mean[1] + 0.2).abs() < 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert!((post.cov[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_posterior_cov_is_spd() {
        let mut s = Stream::new(3, Purpose::Test, 0, 0, 0);
        for _ in 0..5 {
            let w: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| s.normal()).collect()).collect();
            let b: Vec<f64> = (0..3).map(|_| s.normal()).collect();
            let y: Vec<f64> = (0..3).map(|_| s.normal()).collect();
            let post = linear_gaussian_posterior(&w, &b, &y, 1.0, 0.7).unwrap();
            assert!(cholesky(&post.cov, 3).is_some(), "posterior covariance must be SPD");
            for i in 0..3 {
                for j in 0..3 {
                    assert!((post.cov[i * 3 + j] - post.cov[j * 3 + i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn langevin_variance_small_step_limit() {
        let v = discrete_langevin_variance(1.0, 1e-6).unwrap();
        assert!((v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn langevin_variance_known_values() {
        let v = discrete_langevin_variance(1.0, 0.1).unwrap();
        assert!((v - 1.0 / 0.95).abs() < 1e-12);
        let v = discrete_langevin_variance(1.0, 0.4).unwrap();
        assert!((v - 1.25).abs() < 1e-12);
    }

    #[test]
    fn langevin_variance_fixed_point_identity() {
        // v = v (1 - delta/sz^2)^2 + 2 delta must hold exactly.
        for &(sz, delta) in &[(1.0, 0.1), (1.0, 0.4), (2.0, 0.5), (0.5, 0.3)] {
            let v = discrete_langevin_variance(sz, delta).unwrap();
            let a = 1.0 - delta / (sz * sz);
            let residual = v - (v * a * a + 2.0 * delta);
            assert!(residual.abs() < 1e-12, "residual {residual}");
        }
    }

    #[test]
    fn langevin_variance_rejects_unstable_step() {
        assert!(discrete_langevin_variance(1.0, 2.0).is_err());
        assert!(discrete_langevin_variance(1.0, -0.1).is_err());
    }

    #[test]
    fn posterior_matches_grid_quadrature_2d() {
        // Secondary brute-force check on a 2-d latent: dense grid integration
        // of p(z) * N(y; Wz+b, sigma_eps^2 I).
        let w = vec![vec![0.9, -0.3], vec![0.2, 0.7], vec![-0.5, 0.4]];
        let b = vec![0.1, -0.2, 0.05];
        let y = vec![0.7, 0.3, -0.6];
        let (sz, se) = (1.0, 0.8);
        let post = linear_gaussian_posterior(&w, &b, &y, sz, se).unwrap();

        let grid = 301;
        let lim = 5.0;
        let hstep = 2.0 * lim / (grid - 1) as f64;
        let mut norm = 0.0;
        let mut m = [0.0f64; 2];
        for i in 0..grid {
            let z0 = -lim + i as f64 * hstep;
            for j in 0..grid {
                let z1 = -lim + j as f64 * hstep;
                let prior = -(z0 * z0 + z1 * z1) / (2.0 * sz * sz);
                let mut lik = 0.0;
                for (k, row) in w.iter().enumerate() {
                    let r = y[k] - (row[0] * z0 + row[1] * z1 + b[k]);
                    lik -= r * r / (2.0 * se * se);
                }
                let p = (prior + lik).exp();
                norm += p;
                m[0] += p * z0;
                m[1] += p * z1;
            }
        }
        m[0] /= norm;
        m[1] /= norm;
        assert!((m[0] - post.mean[0]).abs() < 0.01, "{} vs {}", m[0], post.mean[0]);
        assert!((m[1] - post.mean[1]).abs() < 0.01, "{} vs {}", m[1], post.mean[1]);
    }
}
