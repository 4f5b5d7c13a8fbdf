use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::continuation::{continuation_value, ContinuationKind};
use super::experiment::derive_seed;
use super::value::{mc_blocks, standard_normals, PosteriorMap, PriorSampler, ValueEstimate};
use crate::error::{Error, Result};
use crate::linalg;
use crate::normal;
use crate::posterior::{posterior_covariance, scalar_index_posterior_variance};
use crate::prior::{GaussianPrior, Prior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceCheck {
    pub kind: String,
    pub value1: ValueEstimate,
    pub value2: ValueEstimate,
    /// Paired estimate of `U(Sigma1) - U(Sigma2)`.
    pub difference: ValueEstimate,
    pub dominance_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// `Sigma1 <= Sigma2` in the Loewner order.
    pub ordered: bool,
    pub min_eigenvalue: f64,
    pub checks: Vec<DominanceCheck>,
}

impl DominanceReport {
    pub fn violations(&self) -> usize {
        self.checks.iter().filter(|c| !c.dominance_holds).count()
    }
}

/// Loewner ordering of two experiments and, when ordered, a paired Monte
/// Carlo check that the less noisy one is worth at least as much. The noisier
/// observation is built as a garbling `Y2 = Y1 + Z`, `Z ~ N(0, Sigma2 - Sigma1)`.
pub fn loewner_dominance(
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    prior: &Prior,
    kinds: &[ContinuationKind],
    draws: usize,
    seed: u64,
) -> Result<DominanceReport> {
    let d = prior.dim();
    if sigma1.shape() != (d, d) || sigma2.shape() != (d, d) {
        return Err(Error::Invalid(format!("both covariances must be {d}x{d}")));
    }
    let gap = linalg::symmetrize(&(sigma2 - sigma1));
    let min_eigenvalue = linalg::sym_eigenvalues(&gap)[0];
    let ordered = min_eigenvalue >= -1e-10;
    if !ordered {
        return Ok(DominanceReport { ordered, min_eigenvalue, checks: Vec::new() });
    }
    let sampler = PriorSampler::new(prior)?;
    let post1 = PosteriorMap::new(prior, sigma1)?;
    let post2 = PosteriorMap::new(prior, sigma2)?;
    let l1 = linalg::psd_sqrt_factor(sigma1);
    let lg = linalg::psd_sqrt_factor(&linalg::psd_project(&gap));
    let checks = kinds
        .iter()
        .map(|kind| {
            let out = mc_blocks(draws, seed, 3, |rng, out| {
                let theta = sampler.sample(rng);
                let y1 = theta + &l1 * standard_normals(rng, d);
                let y2 = &y1 + &lg * standard_normals(rng, d);
                out[0] = post1.continuation(kind, &y1)?;
                out[1] = post2.continuation(kind, &y2)?;
                out[2] = out[0] - out[1];
                Ok(())
            })?;
            let difference = out[2];
            Ok(DominanceCheck {
                kind: kind.name().to_string(),
                value1: out[0],
                value2: out[1],
                difference,
                dominance_holds: difference.value >= -3.0 * difference.mc_stderr,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DominanceReport { ordered, min_eigenvalue, checks })
}

/// One instance of each continuation kind for a `d`-dimensional state.
pub fn standard_kinds(d: usize) -> Vec<ContinuationKind> {
    vec![
        ContinuationKind::Quadratic { lambda: DMatrix::identity(d, d) },
        ContinuationKind::Portfolio { gamma: 2.0, sigma: DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.3 }) },
        ContinuationKind::BinaryAdoption { pi: vec![1.0 / d as f64; d] },
        ContinuationKind::Selection,
        ContinuationKind::Testing { a0: 1.0, a1: 2.0 },
    ]
}

/// Random pair `Sigma1 <= Sigma2`: `Sigma1 = A A' / d + 0.1 I` and
/// `Sigma2 = Sigma1 + B B' / d`, with standard normal entries in `A`, `B`.
pub fn random_ordered_pair(d: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_iterator(d, d, standard_normals(rng, d * d).iter().copied());
    let b = DMatrix::from_iterator(d, d, standard_normals(rng, d * d).iter().copied());
    let s1 = linalg::symmetrize(&(&a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1));
    let s2 = linalg::symmetrize(&(&s1 + &b * b.transpose() / d as f64));
    (s1, s2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackwellStudy {
    pub pairs: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    pub reports: Vec<DominanceReport>,
    pub checks: usize,
    pub violations: usize,
}

/// Dominance checks on `pairs` random ordered pairs for every kind in
/// `kinds`. Pair `p` is drawn from seed `derive_seed(seed, 0, p)` and its
/// Monte Carlo uses `derive_seed(seed, 1, p)`.
pub fn blackwell_study(prior: &Prior, kinds: &[ContinuationKind], pairs: usize, draws: usize, seed: u64) -> Result<BlackwellStudy> {
    let d = prior.dim();
    for k in kinds {
        // Testing acts on the first coordinate only; other kinds need dimension d.
        if !matches!(k, ContinuationKind::Testing { .. }) {
            k.validate(d)?;
        }
    }
    let mut drawn = Vec::with_capacity(pairs);
    let mut reports = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, p as u64));
        let (s1, s2) = random_ordered_pair(d, &mut rng);
        reports.push(loewner_dominance(&s1, &s2, prior, kinds, draws, derive_seed(seed, 1, p as u64))?);
        drawn.push((s1, s2));
    }
    let checks = reports.iter().map(|r| r.checks.len()).sum();
    let violations = reports.iter().map(|r| r.violations() + usize::from(!r.ordered)).sum();
    Ok(BlackwellStudy { pairs: drawn, reports, checks, violations })
}

/// Continuation value of a scalar index given its posterior mean and
/// variance. Selection chooses between the status quo (0) and the index.
pub fn scalar_continuation(kind: &ContinuationKind, mu: f64, post_var: f64) -> Result<f64> {
    match kind {
        ContinuationKind::Selection => Ok(mu.max(0.0)),
        ContinuationKind::Testing { .. } => {
            let p = if post_var > 0.0 {
                normal::cdf(mu / post_var.sqrt())
            } else if mu > 0.0 {
                1.0
            } else {
                0.0
            };
            continuation_value(kind, &DVector::from_element(1, p))
        }
        _ => continuation_value(kind, &DVector::from_element(1, mu)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarIndexReport {
    /// Prior variance of the index `alpha' theta`.
    pub sigma_omega2: f64,
    /// Posterior variance of the index under the full experiment.
    pub s2: f64,
    /// Noise variance of the equivalent scalar experiment, if informative.
    pub tau2: Option<f64>,
    pub reduced: bool,
    pub full_value: ValueEstimate,
    pub scalar_value: Option<ValueEstimate>,
    pub agree: bool,
}

/// Compares the value of the full experiment with the value of the scalar
/// experiment `Z = omega + xi`, `xi ~ N(0, tau2)`, that produces the same
/// posterior variance of `omega = alpha' theta`.
pub fn scalar_index_reduction_check(
    prior: &GaussianPrior,
    sigma: &DMatrix<f64>,
    alpha: &DVector<f64>,
    kind: &ContinuationKind,
    draws: usize,
    seed: u64,
) -> Result<ScalarIndexReport> {
    let d = prior.dim();
    if alpha.len() != d {
        return Err(Error::Invalid(format!("alpha must have length {d}")));
    }
    let v = &prior.covariance;
    let sigma_omega2 = alpha.dot(&(v * alpha));
    let s2 = scalar_index_posterior_variance(v, sigma, alpha)?.max(0.0);
    let full_value = full_index_value(prior, sigma, alpha, kind, s2, draws, seed)?;
    if !(sigma_omega2 > 0.0) || s2 >= sigma_omega2 * (1.0 - 1e-12) {
        return Ok(ScalarIndexReport { sigma_omega2, s2, tau2: None, reduced: false, full_value, scalar_value: None, agree: false });
    }
    let tau2 = sigma_omega2 * s2 / (sigma_omega2 - s2);
    let m = alpha.dot(&prior.mean);
    let gain = sigma_omega2 / (sigma_omega2 + tau2);
    let (so, t) = (sigma_omega2.sqrt(), tau2.sqrt());
    let scalar = mc_blocks(draws, seed, 1, |rng, out| {
        let z = standard_normals(rng, 2);
        let omega = m + so * z[0];
        let obs = omega + t * z[1];
        out[0] = scalar_continuation(kind, m + gain * (obs - m), s2)?;
        Ok(())
    })?[0];
    let tol = 3.0 * (full_value.mc_stderr.powi(2) + scalar.mc_stderr.powi(2)).sqrt();
    let agree = (full_value.value - scalar.value).abs() <= tol.max(1e-12 * full_value.value.abs());
    Ok(ScalarIndexReport { sigma_omega2, s2, tau2: Some(tau2), reduced: true, full_value, scalar_value: Some(scalar), agree })
}

fn full_index_value(
    prior: &GaussianPrior,
    sigma: &DMatrix<f64>,
    alpha: &DVector<f64>,
    kind: &ContinuationKind,
    s2: f64,
    draws: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    let d = prior.dim();
    let p = Prior::Gaussian(prior.clone());
    let sampler = PriorSampler::new(&p)?;
    let post = PosteriorMap::new(&p, sigma)?;
    let noise = linalg::psd_sqrt_factor(sigma);
    Ok(mc_blocks(draws, seed, 1, |rng, out| {
        let theta = sampler.sample(rng);
        let y = theta + &noise * standard_normals(rng, d);
        let (mu, _) = post.summarize(&y)?;
        out[0] = scalar_continuation(kind, alpha.dot(&mu), s2)?;
        Ok(())
    })?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRanking {
    /// `(s2, value)` per candidate experiment, in input order.
    pub entries: Vec<(f64, ValueEstimate)>,
    /// Lower index posterior variance never loses by more than 3 stderr.
    pub consistent: bool,
}

/// Values of several candidate experiments for an index problem, checked
/// against the ordering of their index posterior variances.
pub fn index_ranking_check(
    prior: &GaussianPrior,
    sigmas: &[DMatrix<f64>],
    alpha: &DVector<f64>,
    kind: &ContinuationKind,
    draws: usize,
    seed: u64,
) -> Result<IndexRanking> {
    let entries: Vec<(f64, ValueEstimate)> = sigmas
        .iter()
        .map(|s| {
            let s2 = alpha.dot(&(posterior_covariance(&prior.covariance, s)? * alpha)).max(0.0);
            Ok((s2, full_index_value(prior, s, alpha, kind, s2, draws, seed)?))
        })
        .collect::<Result<_>>()?;
    let mut consistent = true;
    for a in &entries {
        for b in &entries {
            if a.0 < b.0 {
                let tol = 3.0 * (a.1.mc_stderr.powi(2) + b.1.mc_stderr.powi(2)).sqrt();
                if a.1.value < b.1.value - tol {
                    consistent = false;
                }
            }
        }
    }
    Ok(IndexRanking { entries, consistent })
}
