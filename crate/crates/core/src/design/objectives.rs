use nalgebra::{DMatrix, DVector};

use super::{sampling_variance, sampling_variance_derivative};
use crate::config::{ComplianceMode, StrataConfig};
use crate::normal;
use crate::posterior::{posterior_covariance, posterior_mean_sd};
use crate::prior::GaussianPrior;

fn noise_matrix(e: &[f64], config: &StrataConfig) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        e.len(),
        e.iter().enumerate().map(|(g, &x)| sampling_variance(x, g, config, ComplianceMode::Perfect)),
    ))
}

/// Bayes risk `tr(Lambda L Vpost(e) L')` under a Gaussian prior.
pub fn objective1_risk(e: &[f64], prior: &GaussianPrior, l: &DMatrix<f64>, lambda: &DMatrix<f64>, config: &StrataConfig) -> f64 {
    let post = posterior_covariance(&prior.covariance, &noise_matrix(e, config)).expect("noise is positive definite");
    (lambda * l * post * l.transpose()).trace()
}

/// Diffuse-prior risk `tr(Lambda L Sigma(e) L')`.
pub fn objective1_risk_diffuse(e: &[f64], l: &DMatrix<f64>, lambda: &DMatrix<f64>, config: &StrataConfig) -> f64 {
    (lambda * l * noise_matrix(e, config) * l.transpose()).trace()
}

/// Gradient of [`objective1_risk`] in `e`; `None` prior means diffuse.
pub fn objective1_gradient(e: &[f64], prior: Option<&GaussianPrior>, l: &DMatrix<f64>, lambda: &DMatrix<f64>, config: &StrataConfig) -> Vec<f64> {
    let m = l.transpose() * lambda * l;
    let m = (&m + m.transpose()) * 0.5;
    let s = noise_matrix(e, config);
    match prior {
        None => (0..e.len()).map(|g| m[(g, g)] * sampling_variance_derivative(e[g], g, config)).collect(),
        Some(p) => {
            let post = posterior_covariance(&p.covariance, &s).expect("noise is positive definite");
            (0..e.len())
                .map(|g| {
                    let col = post.column(g);
                    let s2 = s[(g, g)];
                    let d_s2 = col.dot(&(&m * col)) / (s2 * s2);
                    d_s2 * sampling_variance_derivative(e[g], g, config)
                })
                .collect()
        }
    }
}

/// Expected adoption value `m Phi(m/s) + s phi(m/s)`, with the `s = 0` limit.
pub fn gamma(m: f64, sigma_b: f64) -> f64 {
    if sigma_b <= 0.0 {
        return m.max(0.0);
    }
    let z = m / sigma_b;
    m * normal::cdf(z) + sigma_b * normal::pdf(z)
}

/// `d sigma_B / d s^2` for `sigma_B = sqrt(v^2 / (v + s^2))`.
pub fn sigma_b_derivative(v: f64, s2: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    -0.5 * v * (v + s2).powf(-1.5)
}

/// Stratum value of the post-experiment adoption decision at propensity `e`.
pub fn gamma_policy(m: f64, v: f64, e: f64, g: usize, config: &StrataConfig) -> f64 {
    let s2 = sampling_variance(e, g, config, ComplianceMode::Perfect);
    gamma(m, posterior_mean_sd(m, v, s2))
}

/// Derivative of [`gamma_policy`] in `e`.
pub fn gamma_policy_derivative(m: f64, v: f64, e: f64, g: usize, config: &StrataConfig) -> f64 {
    let s2 = sampling_variance(e, g, config, ComplianceMode::Perfect);
    let sb = posterior_mean_sd(m, v, s2);
    if sb <= 0.0 {
        return 0.0;
    }
    normal::pdf(m / sb) * sigma_b_derivative(v, s2) * sampling_variance_derivative(e, g, config)
}
