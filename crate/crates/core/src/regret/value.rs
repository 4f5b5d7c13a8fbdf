use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::continuation::{continuation_value, ContinuationKind};
use crate::error::{Error, Result};
use crate::linalg::{self, CholFactor};
use crate::normal;
use crate::posterior::normalize_log_weights;
use crate::prior::{GaussianPrior, Prior};

/// Draws per random stream. Block `b` always uses stream `b` of the seeded
/// generator, so results do not depend on the thread count.
pub const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub mc_stderr: f64,
    pub draws: usize,
}

/// Runs `f` once per draw and returns the mean of each output coordinate
/// with its standard error. `f` must consume the generator in a fixed
/// pattern so that calls with the same seed share random numbers.
pub(crate) fn mc_blocks<F>(draws: usize, seed: u64, outputs: usize, f: F) -> Result<Vec<ValueEstimate>>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) -> Result<()> + Sync,
{
    if draws == 0 {
        return Err(Error::Invalid("draws must be at least 1".into()));
    }
    let blocks = draws.div_ceil(BLOCK);
    let sums: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let count = BLOCK.min(draws - b * BLOCK);
            let mut s = vec![0.0; outputs];
            let mut s2 = vec![0.0; outputs];
            let mut out = vec![0.0; outputs];
            for _ in 0..count {
                f(&mut rng, &mut out)?;
                for k in 0..outputs {
                    s[k] += out[k];
                    s2[k] += out[k] * out[k];
                }
            }
            Ok((s, s2))
        })
        .collect::<Result<_>>()?;
    let n = draws as f64;
    Ok((0..outputs)
        .map(|k| {
            let s: f64 = sums.iter().map(|x| x.0[k]).sum();
            let s2: f64 = sums.iter().map(|x| x.1[k]).sum();
            let mean = s / n;
            let var = if draws > 1 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
            ValueEstimate { value: mean, mc_stderr: (var / n).sqrt(), draws }
        })
        .collect())
}

pub(crate) fn standard_normals(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}

/// Sampler for `theta` under a prior.
pub(crate) enum PriorSampler {
    Gaussian { mean: DVector<f64>, factor: DMatrix<f64> },
    Discrete { atoms: Vec<DVector<f64>>, index: WeightedIndex<f64> },
}

impl PriorSampler {
    pub fn new(prior: &Prior) -> Result<Self> {
        Ok(match prior {
            Prior::Gaussian(g) => PriorSampler::Gaussian { mean: g.mean.clone(), factor: linalg::psd_sqrt_factor(&g.covariance) },
            Prior::Discrete(d) => PriorSampler::Discrete {
                atoms: d.atoms.clone(),
                index: WeightedIndex::new(&d.weights).map_err(|e| Error::Invalid(format!("prior weights: {e}")))?,
            },
        })
    }

    /// Always consumes `dim` normals (Gaussian) or one index draw (discrete).
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            PriorSampler::Gaussian { mean, factor } => mean + factor * standard_normals(rng, mean.len()),
            PriorSampler::Discrete { atoms, index } => atoms[index.sample(rng)].clone(),
        }
    }
}

/// Map from an observation `Y ~ N(theta, Sigma)` to posterior summaries.
pub(crate) enum PosteriorMap {
    Gaussian { mean: DVector<f64>, gain: DMatrix<f64>, post_sd1: f64 },
    Discrete { atoms: Vec<DVector<f64>>, log_w: Vec<f64>, chol: CholFactor },
}

impl PosteriorMap {
    pub fn new(prior: &Prior, sigma: &DMatrix<f64>) -> Result<Self> {
        let d = prior.dim();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::Invalid(format!("Sigma must be {d}x{d}")));
        }
        Ok(match prior {
            Prior::Gaussian(g) => {
                let chol = CholFactor::new(&(&g.covariance + sigma))?;
                let gain = chol.solve(&g.covariance).transpose();
                let post = linalg::symmetrize(&(&g.covariance - &gain * &g.covariance));
                PosteriorMap::Gaussian { mean: g.mean.clone(), gain, post_sd1: post[(0, 0)].max(0.0).sqrt() }
            }
            Prior::Discrete(p) => PosteriorMap::Discrete {
                atoms: p.atoms.clone(),
                log_w: p.weights.iter().map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY }).collect(),
                chol: CholFactor::new(sigma)?,
            },
        })
    }

    /// Posterior mean and posterior probability that `theta_1 > 0`.
    pub fn summarize(&self, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        match self {
            PosteriorMap::Gaussian { mean, gain, post_sd1 } => {
                let mu = mean + gain * (y - mean);
                let p = if *post_sd1 > 0.0 {
                    normal::cdf(mu[0] / post_sd1)
                } else if mu[0] > 0.0 {
                    1.0
                } else {
                    0.0
                };
                Ok((mu, p))
            }
            PosteriorMap::Discrete { atoms, log_w, chol } => {
                let logs: Vec<f64> = atoms.iter().zip(log_w).map(|(a, lw)| lw - 0.5 * chol.quad_form(&(y - a))).collect();
                let w = normalize_log_weights(&logs)?;
                let mut mu = DVector::zeros(y.len());
                let mut p = 0.0;
                for (a, wk) in atoms.iter().zip(&w) {
                    mu.axpy(*wk, a, 1.0);
                    if a[0] > 0.0 {
                        p += wk;
                    }
                }
                Ok((mu, p.min(1.0)))
            }
        }
    }

    pub fn continuation(&self, kind: &ContinuationKind, y: &DVector<f64>) -> Result<f64> {
        let (mu, p) = self.summarize(y)?;
        match kind {
            ContinuationKind::Testing { .. } => continuation_value(kind, &DVector::from_element(1, p)),
            _ => continuation_value(kind, &mu),
        }
    }
}

fn check_kind(kind: &ContinuationKind, dim: usize) -> Result<()> {
    match kind {
        ContinuationKind::Testing { .. } => kind.validate(1),
        _ => kind.validate(dim),
    }
}

/// Monte Carlo estimate of `E[Psi(posterior mean)]` for the experiment
/// `Y ~ N(theta, Sigma)`. Calls with the same seed and prior share their
/// `theta` and noise draws.
pub fn mc_value(prior: &Prior, sigma: &DMatrix<f64>, kind: &ContinuationKind, draws: usize, seed: u64) -> Result<ValueEstimate> {
    let d = prior.dim();
    check_kind(kind, d)?;
    let sampler = PriorSampler::new(prior)?;
    let post = PosteriorMap::new(prior, sigma)?;
    let noise = linalg::psd_sqrt_factor(sigma);
    let out = mc_blocks(draws, seed, 1, |rng, out| {
        let theta = sampler.sample(rng);
        let y = theta + &noise * standard_normals(rng, d);
        out[0] = post.continuation(kind, &y)?;
        Ok(())
    })?;
    Ok(out[0])
}

/// `-tr(Lambda L Vpost L')` with `Vpost = Sigma - Sigma (V + Sigma)^{-1} Sigma`.
pub fn closed_form_value_quadratic(prior: &GaussianPrior, sigma: &DMatrix<f64>, l: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<ValueEstimate> {
    let d = prior.dim();
    if sigma.shape() != (d, d) || l.ncols() != d || lambda.shape() != (l.nrows(), l.nrows()) {
        return Err(Error::Invalid("dimension mismatch in closed-form value".into()));
    }
    let total = &prior.covariance + sigma;
    let chol = total.cholesky().ok_or_else(|| Error::Numerical("V + Sigma is not positive definite".into()))?;
    let vpost = sigma - sigma * chol.solve(sigma);
    let vpost = (&vpost + vpost.transpose()) * 0.5;
    Ok(ValueEstimate { value: -(lambda * l * vpost * l.transpose()).trace(), mc_stderr: 0.0, draws: 0 })
}
