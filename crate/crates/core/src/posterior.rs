//! Conjugate Gaussian and discrete-mixture posteriors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CholFactor};
use crate::prior::{DiscretePrior, GaussianPrior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// `V - V (V + S)^{-1} V`, symmetrized. Never inverts `V`.
pub fn posterior_covariance(v: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = CholFactor::new(&(v + noise)).map_err(|_| Error::Numerical("V + noise is not positive definite".into()))?;
    Ok(linalg::symmetrize(&(v - v * chol.solve(v))))
}

fn check_noise(noise: &DMatrix<f64>, dim: usize) -> Result<()> {
    if noise.nrows() != dim || noise.ncols() != dim {
        return Err(Error::Invalid(format!("noise covariance must be {dim}x{dim}")));
    }
    if !linalg::is_symmetric(noise, 1e-12) || noise.clone().cholesky().is_none() {
        return Err(Error::Invalid("noise covariance is not positive definite".into()));
    }
    Ok(())
}

pub fn gaussian_posterior(prior: &GaussianPrior, observation: &DVector<f64>, noise_cov: &DMatrix<f64>) -> Result<PosteriorSummary> {
    let g = prior.dim();
    if observation.len() != g {
        return Err(Error::Invalid("observation length differs from prior dimension".into()));
    }
    check_noise(noise_cov, g)?;
    let v = &prior.covariance;
    let chol = CholFactor::new(&(v + noise_cov))?;
    let covariance = linalg::symmetrize(&(v - v * chol.solve(v)));
    let mean = &prior.mean + v * chol.solve_vec(&(observation - &prior.mean));
    Ok(PosteriorSummary { mean, covariance })
}

/// Posterior over the atoms of a discrete prior after observing
/// `y ~ N(R theta, noise_cov)`.
pub fn mixture_posterior(prior: &DiscretePrior, observation: &DVector<f64>, noise_cov: &DMatrix<f64>, reporting: &DMatrix<f64>) -> Result<DiscretePrior> {
    let k = observation.len();
    if reporting.nrows() != k || reporting.ncols() != prior.dim() {
        return Err(Error::Invalid("reporting operator shape mismatch".into()));
    }
    check_noise(noise_cov, k)?;
    let chol = CholFactor::new(noise_cov)?;
    let logs: Vec<f64> = prior
        .atoms
        .iter()
        .zip(&prior.weights)
        .map(|(a, &w)| if w > 0.0 { w.ln() + chol.log_density(&(observation - reporting * a)) } else { f64::NEG_INFINITY })
        .collect();
    let weights = normalize_log_weights(&logs)?;
    Ok(DiscretePrior { atoms: prior.atoms.clone(), weights })
}

pub(crate) fn normalize_log_weights(logs: &[f64]) -> Result<Vec<f64>> {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numerical("posterior mass underflows on every atom".into()));
    }
    let mut w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// Prior-predictive standard deviation of the posterior mean.
pub fn posterior_mean_sd(_m: f64, v: f64, s2: f64) -> f64 {
    debug_assert!(v >= 0.0 && s2 > 0.0);
    (v * v / (v + s2)).sqrt()
}

/// Posterior variance of `alpha' theta`.
pub fn scalar_index_posterior_variance(v: &DMatrix<f64>, sigma: &DMatrix<f64>, alpha: &DVector<f64>) -> Result<f64> {
    let post = posterior_covariance(v, sigma)?;
    Ok(alpha.dot(&(post * alpha)))
}
