//! Bundled sample inputs: synthesized archives shaped like the drug-trial
//! overall-survival (OS) and progression-free-survival (PFS) archives, and
//! the drug-trial and four-stratum class-size configurations.
//!
//! The archives are generated from a fixed seed and then calibrated by an
//! affine map per coordinate so that the fitted priors hit published summary
//! moments. The real study-level data are not redistributable.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::StrataConfig;
use crate::error::{Error, Result};
use crate::prior::{fit_gaussian_prior, fit_npmle_independent, GaussianPrior, OptimizerOptions, Structure};
use crate::study_data::{StudyArchive, StudySummary};

pub const DRUG_OS_SEED: u64 = 71;
pub const PFS_SEED: u64 = 53;

/// Gaussian-joint prior moments targeted by the OS archive.
pub const DRUG_OS_MEANS: [f64; 2] = [0.236, 0.114];
pub const DRUG_OS_VARIANCES: [f64; 2] = [0.017, 0.020];

/// Moment-matched NPMLE-independent variances targeted by the PFS archive.
pub const PFS_MEANS: [f64; 2] = [0.20, 0.10];
pub const PFS_VARIANCES: [f64; 2] = [0.015, 0.010];

/// Counts of studies reporting (stratum 1 only, stratum 2 only, both).
pub const DRUG_OS_SHAPE: [usize; 3] = [52, 5, 7];
pub const PFS_SHAPE: [usize; 3] = [44, 5, 4];

/// Per-stratum size used for the drug-trial design examples.
pub const DRUG_STRATUM_SIZE: f64 = 200.0;

/// Two PD-L1 strata, equal shares, unit variances, cost 2, budget 0.5,
/// overlap `[0.05, 0.95]`.
pub fn drug_config() -> StrataConfig {
    StrataConfig {
        n_strata: Some(2),
        shares: vec![0.5, 0.5],
        costs: vec![2.0, 2.0],
        budget: 0.5,
        overlap: 0.05,
        var_treated: vec![1.0, 1.0],
        var_control: vec![1.0, 1.0],
        stratum_sizes: vec![DRUG_STRATUM_SIZE; 2],
        policy_costs: vec![],
        baseline_takeup: None,
        first_stage: None,
        reference_variance: 1.0,
    }
}

/// Four class-size strata with unit costs and a 30% treatment budget.
pub fn star_config() -> StrataConfig {
    let shares = vec![0.261, 0.065, 0.222, 0.452];
    StrataConfig {
        n_strata: Some(4),
        stratum_sizes: shares.iter().map(|p| 100.0 * p).collect(),
        shares,
        costs: vec![1.0; 4],
        budget: 0.30,
        overlap: 0.05,
        var_treated: vec![800.0, 1100.0, 800.0, 1100.0],
        var_control: vec![800.0, 1100.0, 800.0, 1100.0],
        policy_costs: vec![],
        baseline_takeup: None,
        first_stage: None,
        reference_variance: 1.0,
    }
}

/// Illustrative prior for the class-size strata with `m1 > m2 > max(m3, m4)`.
pub fn star_prior() -> GaussianPrior {
    GaussianPrior::diagonal(&[6.0, 5.0, 4.0, 3.0], &[150.0, 200.0, 100.0, 60.0])
}

/// Unscaled draws: reported coordinates and standard errors per study.
struct RawStudy {
    coords: Vec<usize>,
    deviation: Vec<f64>,
    se: Vec<f64>,
}

fn raw_studies(shape: [usize; 3], seed: u64, se_range: (f64, f64), draw_theta: impl Fn(&mut ChaCha8Rng) -> [f64; 2]) -> Vec<RawStudy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = [(shape[0], vec![0]), (shape[1], vec![1]), (shape[2], vec![0, 1])];
    let mut out = Vec::new();
    for (count, coords) in layout {
        for _ in 0..count {
            let theta = draw_theta(&mut rng);
            let se: Vec<f64> = coords.iter().map(|_| rng.random_range(se_range.0..se_range.1)).collect();
            let deviation = coords
                .iter()
                .zip(&se)
                .map(|(&g, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    theta[g] + s * z
                })
                .collect();
            out.push(RawStudy { coords: coords.clone(), deviation, se });
        }
    }
    out
}

fn assemble(raw: &[RawStudy], prefix: &str, shift: [f64; 2], scale: [f64; 2]) -> Result<StudyArchive> {
    let studies = raw
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let est: Vec<f64> = r.coords.iter().zip(&r.deviation).map(|(&g, d)| shift[g] + scale[g] * d).collect();
            StudySummary::selection(format!("{prefix}{:02}", i + 1), 2, &r.coords, &est, &r.se)
        })
        .collect();
    StudyArchive::new(studies, 2)
}

fn mean_se2(raw: &[RawStudy], g: usize) -> f64 {
    let v: Vec<f64> =
        raw.iter().flat_map(|r| r.coords.iter().zip(&r.se).filter(|(c, _)| **c == g).map(|(_, s)| s * s)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fixed-point calibration of a per-coordinate affine map so that `fit`
/// returns the target means and variances.
fn calibrate(
    raw: &[RawStudy],
    prefix: &str,
    means: [f64; 2],
    variances: [f64; 2],
    rel_tol: f64,
    fit: impl Fn(&StudyArchive) -> Result<([f64; 2], [f64; 2])>,
) -> Result<StudyArchive> {
    let c = [mean_se2(raw, 0), mean_se2(raw, 1)];
    let (mut shift, mut scale) = (means, [1.0, 1.0]);
    for _ in 0..60 {
        let archive = assemble(raw, prefix, shift, scale)?;
        let (m, v) = fit(&archive)?;
        let done = (0..2).all(|g| (v[g] - variances[g]).abs() <= rel_tol * variances[g] && (m[g] - means[g]).abs() <= 1e-4);
        if done {
            return Ok(archive);
        }
        for g in 0..2 {
            shift[g] += means[g] - m[g];
            scale[g] *= ((variances[g] + c[g]) / (v[g].max(0.0) + c[g])).sqrt();
        }
    }
    Err(Error::Numerical(format!("sample archive {prefix} calibration did not converge")))
}

/// Synthesized OS archive: 64 studies (52 report the high-expression stratum
/// only, 5 the low-expression stratum only, 7 both). Its Gaussian-joint fit
/// has means about `(0.236, 0.114)` and variances about `(0.017, 0.020)`.
pub fn drug_os_archive() -> Result<StudyArchive> {
    let sd = [DRUG_OS_VARIANCES[0].sqrt(), DRUG_OS_VARIANCES[1].sqrt()];
    let rho: f64 = 0.2;
    let raw = raw_studies(DRUG_OS_SHAPE, DRUG_OS_SEED, (0.10, 0.25), |rng| {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        [sd[0] * z1, sd[1] * (rho * z1 + (1.0 - rho * rho).sqrt() * z2)]
    });
    calibrate(&raw, "os", DRUG_OS_MEANS, DRUG_OS_VARIANCES, 1e-3, |a| {
        let (p, _) = fit_gaussian_prior(a, Structure::Full, &OptimizerOptions::gaussian())?;
        let v = p.variances();
        Ok(([p.mean[0], p.mean[1]], [v[0], v[1]]))
    })
}

/// Synthesized PFS archive: 53 studies (44 / 5 / 4) drawn from a two-point
/// effect distribution per stratum. Its NPMLE-independent fit, moment
/// matched, has variances about `(0.015, 0.010)`.
pub fn pfs_archive() -> Result<StudyArchive> {
    let raw = raw_studies(PFS_SHAPE, PFS_SEED, (0.05, 0.12), |rng| {
        let a = if rng.random_bool(0.3) { -0.2 } else { 0.12 };
        let b = if rng.random_bool(0.5) { -0.1 } else { 0.1 };
        [a, b]
    });
    calibrate(&raw, "pfs", PFS_MEANS, PFS_VARIANCES, 2e-3, |a| {
        let (m, v) = npmle_independent_moments(a)?;
        Ok(([m[0], m[1]], [v[0], v[1]]))
    })
}

/// Means and variances of the NPMLE-independent fit, per coordinate.
pub fn npmle_independent_moments(archive: &StudyArchive) -> Result<(Vec<f64>, Vec<f64>)> {
    let fits = fit_npmle_independent(archive, 60, 3.0, &OptimizerOptions::default())?;
    let m = fits.iter().map(|(p, _)| p.mean()[0]).collect();
    let v = fits.iter().map(|(p, _)| p.covariance()[(0, 0)]).collect();
    Ok((m, v))
}

/// Product Gaussian prior with the moments of the NPMLE-independent fit.
pub fn npmle_independent_moment_prior(archive: &StudyArchive) -> Result<GaussianPrior> {
    let (m, v) = npmle_independent_moments(archive)?;
    Ok(GaussianPrior::new(DVector::from_vec(m), DMatrix::from_diagonal(&DVector::from_vec(v)), Structure::Diagonal))
}
