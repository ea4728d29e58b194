//! Chain quality metrics and the exact Gaussian posterior oracle for the
//! linear flow model.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::ObservationModel;
use crate::model::LinearFlowParams;
use crate::prior::GaussianPrior;

/// Mean squared error of the post-burn-in sample mean against the truth:
/// `(1/n) sum_j ||xbar_j - x_j||^2`.
pub fn mse(samples: &[Vec<f64>], truth: &[f64], burn_in: usize) -> Result<f64> {
    if burn_in >= samples.len() {
        return Err(Error::InvalidArgument(format!(
            "burn-in {burn_in} >= sample count {}",
            samples.len()
        )));
    }
    let n = truth.len();
    let kept = &samples[burn_in..];
    let mut mean = vec![0.0; n];
    for s in kept {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / kept.len() as f64;
        }
    }
    Ok(mean.iter().zip(truth).map(|(m, t)| (m - t) * (m - t)).sum::<f64>() / n as f64)
}

/// Mean sample variance of the post-burn-in chain:
/// `(1/(n (K - k0))) sum_k sum_j ||x^k_j - xbar_j||^2`.
pub fn msv(samples: &[Vec<f64>], burn_in: usize) -> Result<f64> {
    if burn_in >= samples.len() {
        return Err(Error::InvalidArgument(format!(
            "burn-in {burn_in} >= sample count {}",
            samples.len()
        )));
    }
    let kept = &samples[burn_in..];
    let n = kept[0].len();
    let mut mean = vec![0.0; n];
    for s in kept {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / kept.len() as f64;
        }
    }
    let mut acc = 0.0;
    for s in kept {
        for (m, v) in mean.iter().zip(s) {
            acc += (v - m) * (v - m);
        }
    }
    Ok(acc / (n as f64 * kept.len() as f64))
}

/// Per-block and aggregate acceptance rates. Blocks with zero proposals
/// report NaN rather than failing.
pub fn acceptance_rate(accepted: &[u64], proposed: &[u64]) -> (Vec<f64>, f64) {
    let per_block = accepted
        .iter()
        .zip(proposed)
        .map(|(&a, &p)| if p == 0 { f64::NAN } else { a as f64 / p as f64 })
        .collect();
    let (a, p): (u64, u64) = (accepted.iter().sum(), proposed.iter().sum());
    let aggregate = if p == 0 { f64::NAN } else { a as f64 / p as f64 };
    (per_block, aggregate)
}

/// Matrix exponential (scaling-and-squaring Padé approximant).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().exp()
}

/// The circulant tridiagonal drift matrix of the linear flow model:
/// diagonal `b`, subdiagonal `a`, superdiagonal `c`, periodic corners.
pub fn circulant_tridiagonal(n: usize, a: f64, b: f64, c: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = b;
        m[(j, (j + n - 1) % n)] = a;
        m[(j, (j + 1) % n)] = c;
    }
    m
}

/// Exact Gaussian posterior of the linear flow initial condition.
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorOracle {
    pub mean: Vec<f64>,
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
}

impl PosteriorOracle {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.covariance.nrows()).map(|i| self.covariance[(i, i)]).collect()
    }

    /// Mean of the per-component posterior variances.
    pub fn mean_variance(&self) -> f64 {
        let n = self.covariance.nrows();
        self.diagonal().iter().sum::<f64>() / n as f64
    }
}

/// Composite Simpson approximation of
/// `int_0^T sigma^2 (e^{-Mt})^T e^{-Mt} dt` with `panels` subintervals.
fn simpson_noise_integral(m_mat: &DMatrix<f64>, sigma_sq: f64, t_end: f64, panels: usize) -> DMatrix<f64> {
    let n = m_mat.nrows();
    let dt = t_end / panels as f64;
    let step = expm(&(-m_mat * dt));
    let mut p = DMatrix::identity(n, n);
    let mut acc = p.transpose() * &p; // t = 0 node, weight 1
    for k in 1..=panels {
        p *= &step;
        let integrand = p.transpose() * &p;
        let w = if k == panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += integrand * w;
    }
    acc * (sigma_sq * dt / 3.0)
}

/// Exact posterior of the linear flow model via the semigroup solution:
/// `x(T) = e^{MT} x(0) + e^{MT} int_0^T e^{-Mt} sigma dW(t)`, so `y` is a
/// linear-Gaussian observation of `x(0)` and conjugacy gives the posterior
/// in closed form, up to one quadrature for the integrated noise covariance.
///
/// The quadrature doubles `quad_steps` until the noise integral is stable to
/// 1e-8 in relative Frobenius norm, and errors out if that never happens.
pub fn exact_linear_posterior(
    params: &LinearFlowParams,
    n: usize,
    prior: &GaussianPrior,
    obs: &ObservationModel,
    t_end: f64,
    quad_steps: usize,
) -> Result<PosteriorOracle> {
    if prior.n() != n || obs.n_state() != n {
        return Err(Error::InvalidArgument("posterior oracle: dimension mismatch".into()));
    }
    if t_end <= 0.0 {
        return Err(Error::InvalidArgument("posterior oracle needs T > 0".into()));
    }
    let (a, b, c) = params.coefficients();
    let m_mat = circulant_tridiagonal(n, a, b, c);
    let sigma_sq = params.noise * params.noise;

    let mut panels = quad_steps.max(2);
    if panels % 2 == 1 {
        panels += 1;
    }
    let mut q = simpson_noise_integral(&m_mat, sigma_sq, t_end, panels);
    let mut converged = sigma_sq == 0.0;
    for _ in 0..6 {
        if converged {
            break;
        }
        let finer = simpson_noise_integral(&m_mat, sigma_sq, t_end, panels * 2);
        let gap = (&finer - &q).norm();
        let scale = finer.norm().max(1e-300);
        q = finer;
        panels *= 2;
        if gap <= 1e-8 * scale {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Accuracy(
            "noise-covariance quadrature did not stabilize to 1e-8 while doubling panels".into(),
        ));
    }

    let g = expm(&(&m_mat * t_end));
    let hg = obs.h() * &g;
    let m_prime = &hg * q * hg.transpose();
    let gram = Cholesky::new(&m_prime + obs.r())
        .ok_or_else(|| Error::NotPositiveDefinite("integrated noise + observation covariance".into()))?;
    // (M' + R)^{-1} H e^{MT} and the posterior precision.
    let solved_hg = gram.solve(&hg);
    let pos_precision = prior.precision() + hg.transpose() * &solved_hg;
    let pos_chol = Cholesky::new(pos_precision)
        .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
    let covariance = pos_chol.inverse();
    let mean = &covariance * (hg.transpose() * gram.solve(obs.y()));
    Ok(PosteriorOracle {
        mean: mean.as_slice().to_vec(),
        covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mse_zero_when_samples_equal_truth() {
        let truth = vec![1.0, -2.0, 3.0];
        let samples = vec![truth.clone(); 5];
        assert_eq!(mse(&samples, &truth, 1).unwrap(), 0.0);
    }

    #[test]
    fn mse_hand_value_unit_offsets() {
        // Single sample offset by (1, 1) from truth, n = 2: (1+1)/2 = 1.
        let truth = vec![0.0, 0.0];
        let samples = vec![vec![1.0, 1.0]];
        assert_eq!(mse(&samples, &truth, 0).unwrap(), 1.0);
    }

    #[test]
    fn mse_rejects_burn_in_past_end() {
        let samples = vec![vec![0.0]; 3];
        assert!(mse(&samples, &[0.0], 3).is_err());
    }

    #[test]
    fn msv_constant_chain_is_zero() {
        let samples = vec![vec![2.0, -1.0]; 10];
        assert_eq!(msv(&samples, 2).unwrap(), 0.0);
    }

    #[test]
    fn msv_symmetric_pair_gives_v_squared() {
        let v = 0.7;
        let samples = vec![vec![v], vec![-v]];
        assert_relative_eq!(msv(&samples, 0).unwrap(), v * v, max_relative = 1e-14);
    }

    #[test]
    fn acceptance_rates_with_guards() {
        let (per, agg) = acceptance_rate(&[5, 0, 3], &[5, 0, 6]);
        assert_eq!(per[0], 1.0);
        assert!(per[1].is_nan());
        assert_eq!(per[2], 0.5);
        assert_relative_eq!(agg, 8.0 / 11.0, max_relative = 1e-14);
        let (_, agg_empty) = acceptance_rate(&[], &[]);
        assert!(agg_empty.is_nan());
    }

    fn paper_m(n: usize) -> DMatrix<f64> {
        let (a, b, c) = LinearFlowParams::default().coefficients();
        circulant_tridiagonal(n, a, b, c)
    }

    #[test]
    fn expm_inverse_identity_paper_regime() {
        for a in [paper_m(40) * 0.4, paper_m(40)] {
            let prod = expm(&a) * expm(&(-&a));
            let err = (&prod - DMatrix::identity(40, 40)).amax();
            assert!(err < 1e-10, "exp(A)exp(-A) off identity by {err}");
        }
    }

    #[test]
    fn quadrature_stabilizes_at_default_panels() {
        let m = paper_m(16);
        let q1 = simpson_noise_integral(&m, 0.01, 0.4, 400);
        let q2 = simpson_noise_integral(&m, 0.01, 0.4, 800);
        let rel = (&q1 - &q2).norm() / q2.norm();
        assert!(rel < 1e-8, "Simpson halving changed the integral by {rel}");
    }

    fn paper_obs(n: usize, noise_var: f64, y_val: f64) -> ObservationModel {
        let mut h = DMatrix::zeros(n / 2, n);
        for i in 0..n / 2 {
            h[(i, 2 * i)] = 1.0;
        }
        ObservationModel::new(h, DMatrix::identity(n / 2, n / 2) * noise_var, vec![y_val; n / 2]).unwrap()
    }

    #[test]
    fn oracle_covariance_is_spd_and_shrinks_prior() {
        let n = 16;
        let prior = GaussianPrior::standard_normal(n, 2).unwrap();
        let obs = paper_obs(n, 0.01, 0.3);
        let oracle =
            exact_linear_posterior(&LinearFlowParams::default(), n, &prior, &obs, 0.4, 400).unwrap();
        let cov = &oracle.covariance;
        let sym_err = (cov - cov.transpose()).amax();
        assert!(sym_err < 1e-12, "asymmetry {sym_err}");
        assert!(Cholesky::new(cov.clone()).is_some(), "posterior covariance not SPD");
        for i in 0..n {
            assert!(cov[(i, i)] <= prior.covariance()[(i, i)] + 1e-12);
        }
    }

    #[test]
    fn noiseless_limit_recovers_pullback() {
        // sigma_x = 0, H = I, R -> 0: the posterior collapses onto
        // e^{-MT} y.
        let n = 8;
        let params = LinearFlowParams {
            noise: 0.0,
            ..LinearFlowParams::default()
        };
        let prior = GaussianPrior::standard_normal(n, 1).unwrap();
        let (a, b, c) = params.coefficients();
        let m_mat = circulant_tridiagonal(n, a, b, c);
        let truth = DVector::from_fn(n, |i, _| (i as f64 * 0.37).sin());
        let y = expm(&(&m_mat * 0.4)) * &truth;
        let obs = ObservationModel::new(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n) * 1e-10,
            y.as_slice().to_vec(),
        )
        .unwrap();
        // The R = 1e-10 floor is amplified by ||e^{-MT}||^2 (about 3e3), so
        // "near zero" here means well under 1e-6.
        let oracle = exact_linear_posterior(&params, n, &prior, &obs, 0.4, 100).unwrap();
        assert!(oracle.mean_variance() < 1e-6, "variance {}", oracle.mean_variance());
        for i in 0..n {
            assert_relative_eq!(oracle.mean[i], truth[i], max_relative = 1e-5, epsilon = 1e-6);
        }
    }

    #[test]
    fn oracle_rejects_mismatched_dimensions() {
        let prior = GaussianPrior::standard_normal(8, 2).unwrap();
        let obs = paper_obs(16, 0.01, 0.0);
        assert!(exact_linear_posterior(&LinearFlowParams::default(), 16, &prior, &obs, 0.4, 100).is_err());
    }
}
