//! Property checks shared by the proptest target and the acceptance report.
//! Each check drives its own deterministic runner and returns the first
//! failure as a message.

#![allow(dead_code)]

use ebdesign::config::{ComplianceMode, StrataConfig};
use ebdesign::design::{
    gamma, gamma_policy, grid_search_design, sampling_variance, solve, solve_objective1, DesignProblem, Objective,
};
use ebdesign::posterior::{gaussian_posterior, mixture_posterior, posterior_covariance, posterior_mean_sd};
use ebdesign::prior::{
    build_grid, fit_gaussian_prior, fit_npmle, gls_mean, marginal_loglik, profile_gradient_log_cholesky, DiscretePrior,
    GaussianPrior, OptimizerOptions, Prior, Structure,
};
use ebdesign::regret::{
    blackwell_study, continuation_value, mc_value, regret_experiment, standard_kinds, two_stratum_curvature, two_stratum_modulus,
    two_stratum_oracle, ContinuationKind, Estimator, ExperimentSettings, Marginal, RegretTemplate,
};
use ebdesign::study_data::{parse_archive, validate_archive, write_archive, Severity, StudyArchive, StudySummary};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = fn() -> Result<(), String>;

/// Name and check for every property in the suite.
pub const PROPERTIES: &[(&str, Check)] = &[
    ("lemma1_posterior_mean_law", lemma1_posterior_mean_law),
    ("em_monotone_trajectory", em_monotone_trajectory),
    ("em_simplex_preservation", em_simplex_preservation),
    ("gls_equal_weights_is_sample_mean", gls_equal_weights_is_sample_mean),
    ("profile_stationarity", profile_stationarity),
    ("shift_equivariance", shift_equivariance),
    ("discrete_gaussian_agreement", discrete_gaussian_agreement),
    ("posterior_covariance_dominance", posterior_covariance_dominance),
    ("mixture_posterior_sign", mixture_posterior_sign),
    ("mixture_martingale", mixture_martingale),
    ("design_oracle_agreement", design_oracle_agreement),
    ("comparative_statics", comparative_statics),
    ("complementary_slackness", complementary_slackness),
    ("objective2_bang_bang", objective2_bang_bang),
    ("diffuse_limit_continuity", diffuse_limit_continuity),
    ("gamma_bounds", gamma_bounds),
    ("lipschitz_certificates", lipschitz_certificates),
    ("oracle_inequality", oracle_inequality),
    ("regret_nonnegative", regret_nonnegative),
    ("garbling_monotonicity", garbling_monotonicity),
    ("two_stratum_curvature", two_stratum_curvature_check),
    ("reproducibility", reproducibility),
    ("archive_round_trip", archive_round_trip),
];

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(TestCaseError::fail(format!($($fmt)*)));
        }
    };
}

fn ok<T>(r: ebdesign::Result<T>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random symmetric positive definite matrix `A A' / d + floor I`.
fn spd(d: usize, scale: f64, floor: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let m = (&a * a.transpose()) * (scale / d as f64) + DMatrix::identity(d, d) * floor;
    (&m + m.transpose()) * 0.5
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Full-reporting archive from a Gaussian truth with heterogeneous SEs.
fn gaussian_archive(n: usize, mean: &[f64], sd: &[f64], se: (f64, f64), seed: u64) -> StudyArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let studies = (0..n)
        .map(|i| {
            let s: Vec<f64> = mean.iter().map(|_| rng.random_range(se.0..se.1)).collect();
            let est: Vec<f64> = mean.iter().zip(sd).zip(&s).map(|((m, v), e)| m + v * normal(&mut rng) + e * normal(&mut rng)).collect();
            StudySummary::full(format!("s{i}"), &est, &s)
        })
        .collect();
    StudyArchive::new(studies, mean.len()).unwrap()
}

pub fn lemma1_posterior_mean_law() -> Result<(), String> {
    run(24, (-2.0..2.0f64, 0.1..3.0f64, 0.1..3.0f64, any::<u64>()), |(m, v, s2, seed)| {
        let draws = 50_000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = v / (v + s2);
        let (mut s, mut ss, mut resid) = (0.0, 0.0, 0.0);
        let mut resid2 = 0.0;
        for _ in 0..draws {
            let theta = m + v.sqrt() * normal(&mut rng);
            let y = theta + s2.sqrt() * normal(&mut rng);
            let mu = m + k * (y - m);
            s += mu;
            ss += mu * mu;
            resid += theta - mu;
            resid2 += (theta - mu) * (theta - mu);
        }
        let n = draws as f64;
        let mean = s / n;
        let sd = ((ss - n * mean * mean) / (n - 1.0)).sqrt();
        let target = posterior_mean_sd(m, v, s2);
        let se_sd = target / (2.0 * (n - 1.0)).sqrt();
        ensure!((sd - target).abs() <= 3.0 * se_sd, "sd {sd} vs {target} (se {se_sd})");
        ensure!((mean - m).abs() <= 3.0 * target / n.sqrt(), "mean of posterior means {mean} vs {m}");
        // E[theta | mu] = mu: the residual theta - mu has mean zero.
        let r_sd = (resid2 / n).sqrt();
        ensure!((resid / n).abs() <= 3.0 * r_sd / n.sqrt(), "residual mean {}", resid / n);
        Ok(())
    })
}

fn random_small_archive(n: usize, d: usize, seed: u64) -> StudyArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let studies = (0..n)
        .map(|i| {
            let est: Vec<f64> = (0..d).map(|_| 2.0 * normal(&mut rng)).collect();
            let se: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..1.5)).collect();
            StudySummary::full(format!("s{i}"), &est, &se)
        })
        .collect();
    StudyArchive::new(studies, d).unwrap()
}

pub fn em_monotone_trajectory() -> Result<(), String> {
    run(40, (2usize..30, 1usize..3, any::<u64>()), |(n, d, seed)| {
        let archive = random_small_archive(n, d, seed);
        let grid = ok(build_grid(&archive, 15, 3.0))?;
        let opts = OptimizerOptions { max_iterations: 300, tolerance: 0.0, prune_threshold: 0.0 };
        let (_, report) = ok(fit_npmle(&archive, &grid, &opts))?;
        for w in report.trajectory.windows(2) {
            ensure!(w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()), "loglik decreased {} -> {}", w[0], w[1]);
        }
        Ok(())
    })
}

pub fn em_simplex_preservation() -> Result<(), String> {
    run(20, (2usize..25, 1usize..3, any::<u64>()), |(n, d, seed)| {
        let archive = random_small_archive(n, d, seed);
        let grid = ok(build_grid(&archive, 12, 3.0))?;
        for steps in [1, 2, 3, 5, 10, 40] {
            let opts = OptimizerOptions { max_iterations: steps, tolerance: 0.0, prune_threshold: 0.0 };
            let (p, _) = ok(fit_npmle(&archive, &grid, &opts))?;
            ensure!(p.weights.iter().all(|&w| w >= 0.0), "negative weight after {steps} steps");
            let total: f64 = p.weights.iter().sum();
            ensure!((total - 1.0).abs() <= 1e-12, "weights sum to {total} after {steps} steps");
        }
        Ok(())
    })
}

pub fn gls_equal_weights_is_sample_mean() -> Result<(), String> {
    run(50, (2usize..40, 1usize..4, 0.05..2.0f64, any::<u64>()), |(n, d, se, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ests: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
        let studies = ests.iter().enumerate().map(|(i, e)| StudySummary::full(format!("s{i}"), e, &vec![se; d])).collect();
        let archive = StudyArchive::new(studies, d).unwrap();
        let v = spd(d, 0.5, 0.1, &mut rng);
        let tau = ok(gls_mean(&archive, &v))?;
        for g in 0..d {
            let mean = ests.iter().map(|e| e[g]).sum::<f64>() / n as f64;
            ensure!((tau[g] - mean).abs() <= 1e-12 * (1.0 + mean.abs()), "gls {} vs sample mean {mean}", tau[g]);
        }
        Ok(())
    })
}

pub fn profile_stationarity() -> Result<(), String> {
    run(12, (80usize..200, any::<u64>()), |(n, seed)| {
        let archive = gaussian_archive(n, &[0.3, -0.2], &[1.0, 0.8], (0.2, 0.6), seed);
        let opts = OptimizerOptions::gaussian();
        let (p, report) = ok(fit_gaussian_prior(&archive, Structure::Full, &opts))?;
        if !report.converged || min_eig(&p.covariance) < 1e-3 {
            return Ok(());
        }
        let grad = ok(profile_gradient_log_cholesky(&archive, &p.covariance))?;
        let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        ensure!(norm <= opts.tolerance, "gradient norm {norm} at the fitted V");
        Ok(())
    })
}

pub fn shift_equivariance() -> Result<(), String> {
    run(12, (30usize..120, -3.0..3.0f64, -3.0..3.0f64, any::<u64>()), |(n, b1, b2, seed)| {
        let archive = gaussian_archive(n, &[0.0, 0.5], &[0.7, 1.1], (0.2, 0.8), seed);
        let b = DVector::from_vec(vec![b1, b2]);
        let opts = OptimizerOptions::gaussian();
        let (p, _) = ok(fit_gaussian_prior(&archive, Structure::Full, &opts))?;
        let (q, _) = ok(fit_gaussian_prior(&archive.shifted(&b), Structure::Full, &opts))?;
        ensure!((&q.mean - &p.mean - &b).amax() <= 1e-6, "tau shift {:?}", (&q.mean - &p.mean).as_slice());
        ensure!((&q.covariance - &p.covariance).amax() <= 1e-6 * (1.0 + p.covariance.amax()), "V changed under shift");
        Ok(())
    })
}

pub fn discrete_gaussian_agreement() -> Result<(), String> {
    run(20, (5usize..40, -1.0..1.0f64, 0.2..2.0f64, any::<u64>()), |(n, tau, v, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let studies = (0..n)
            .map(|i| {
                let se = rng.random_range(0.32..1.0);
                StudySummary::full(format!("s{i}"), &[tau + v.sqrt() * normal(&mut rng) + se * normal(&mut rng)], &[se])
            })
            .collect();
        let archive = StudyArchive::new(studies, 1).unwrap();
        let k = 801;
        let sd = v.sqrt();
        let xs: Vec<f64> = (0..k).map(|j| tau - 8.0 * sd + 16.0 * sd * j as f64 / (k - 1) as f64).collect();
        let raw: Vec<f64> = xs.iter().map(|x| (-(x - tau).powi(2) / (2.0 * v)).exp()).collect();
        let total: f64 = raw.iter().sum();
        let quad = ok(DiscretePrior::scalar(&xs, &raw.iter().map(|w| w / total).collect::<Vec<_>>()))?;
        let gauss = GaussianPrior::diagonal(&[tau], &[v]);
        let ld = ok(marginal_loglik(&Prior::Discrete(quad), &archive))?;
        let lg = ok(marginal_loglik(&Prior::Gaussian(gauss), &archive))?;
        ensure!((ld - lg).abs() <= 1e-3 * n as f64, "discrete {ld} vs gaussian {lg}");
        Ok(())
    })
}

pub fn posterior_covariance_dominance() -> Result<(), String> {
    run(200, (1usize..5, any::<u64>()), |(d, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = spd(d, 2.0, 0.01, &mut rng);
        let s = spd(d, 1.0, 0.05, &mut rng);
        let post = ok(posterior_covariance(&v, &s))?;
        ensure!(min_eig(&(&v - &post)) >= -1e-10, "Vpost not below V");
        ensure!(min_eig(&(&s - &post)) >= -1e-10, "Vpost not below Sigma");
        let prior = GaussianPrior::new(DVector::zeros(d), v, Structure::Full);
        let y1 = DVector::from_fn(d, |_, _| normal(&mut rng));
        let y2 = DVector::from_fn(d, |_, _| 5.0 * normal(&mut rng));
        let p1 = ok(gaussian_posterior(&prior, &y1, &s))?;
        let p2 = ok(gaussian_posterior(&prior, &y2, &s))?;
        ensure!(p1.covariance == p2.covariance, "posterior covariance depends on the data");
        Ok(())
    })
}

fn random_discrete(d: usize, atoms: usize, rng: &mut ChaCha8Rng) -> DiscretePrior {
    let a: Vec<DVector<f64>> = (0..atoms).map(|_| DVector::from_fn(d, |_, _| 1.5 * normal(rng))).collect();
    let w: Vec<f64> = (0..atoms).map(|_| rng.random_range(0.05..1.0)).collect();
    let t: f64 = w.iter().sum();
    DiscretePrior::new(a, w.iter().map(|x| x / t).collect()).unwrap()
}

pub fn mixture_posterior_sign() -> Result<(), String> {
    run(200, (1usize..4, 1usize..8, any::<u64>()), |(d, k, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = random_discrete(d, k, &mut rng);
        let s = spd(d, 1.0, 0.2, &mut rng);
        let sinv = s.clone().try_inverse().unwrap();
        let r = DMatrix::identity(d, d);
        let y = DVector::from_fn(d, |_, _| 2.0 * normal(&mut rng));
        let u = DVector::from_fn(d, |_, _| normal(&mut rng));
        let h = 1e-4;
        let m0 = ok(mixture_posterior(&prior, &y, &s, &r))?.mean();
        let m1 = ok(mixture_posterior(&prior, &(&y + &u * h), &s, &r))?.mean();
        let shift = (m1 - m0).dot(&(&sinv * &u));
        ensure!(shift >= -1e-12, "posterior mean moved against the data: {shift}");
        Ok(())
    })
}

pub fn mixture_martingale() -> Result<(), String> {
    run(16, (1usize..3, 1usize..6, any::<u64>()), |(d, k, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = random_discrete(d, k, &mut rng);
        let s = spd(d, 1.0, 0.2, &mut rng);
        let l = s.clone().cholesky().unwrap().l();
        let r = DMatrix::identity(d, d);
        let idx = rand::distr::weighted::WeightedIndex::new(&prior.weights).unwrap();
        let draws = 20_000;
        let mut sum = DVector::zeros(d);
        let mut sq = DVector::zeros(d);
        for _ in 0..draws {
            let theta = &prior.atoms[idx.sample(&mut rng)];
            let y = theta + &l * DVector::from_fn(d, |_, _| normal(&mut rng));
            let m = ok(mixture_posterior(&prior, &y, &s, &r))?.mean();
            sq += m.component_mul(&m);
            sum += m;
        }
        let n = draws as f64;
        let mean = &sum / n;
        let target = prior.mean();
        for g in 0..d {
            let var = (sq[g] / n - mean[g] * mean[g]).max(0.0);
            let se = (var / n).sqrt();
            ensure!((mean[g] - target[g]).abs() <= 4.0 * se + 1e-12, "coordinate {g}: {} vs prior mean {}", mean[g], target[g]);
        }
        Ok(())
    })
}

fn random_config(g: usize, rng: &mut ChaCha8Rng) -> StrataConfig {
    let raw: Vec<f64> = (0..g).map(|_| rng.random_range(0.2..1.0)).collect();
    let t: f64 = raw.iter().sum();
    let shares: Vec<f64> = raw.iter().map(|x| x / t).collect();
    let costs: Vec<f64> = (0..g).map(|_| rng.random_range(0.5..2.0)).collect();
    let overlap = 0.05;
    let lo: f64 = shares.iter().zip(&costs).map(|(p, c)| p * c * overlap).sum();
    let hi: f64 = shares.iter().zip(&costs).map(|(p, c)| p * c * (1.0 - overlap)).sum();
    StrataConfig {
        n_strata: None,
        budget: lo + rng.random_range(0.1..0.9) * (hi - lo),
        shares,
        costs,
        overlap,
        var_treated: (0..g).map(|_| rng.random_range(0.5..2.0)).collect(),
        var_control: (0..g).map(|_| rng.random_range(0.5..2.0)).collect(),
        stratum_sizes: (0..g).map(|_| rng.random_range(20.0..300.0)).collect(),
        policy_costs: (0..g).map(|_| rng.random_range(-0.2..0.2)).collect(),
        baseline_takeup: None,
        first_stage: None,
        reference_variance: 1.0,
    }
}

fn random_prior(g: usize, correlated: bool, rng: &mut ChaCha8Rng) -> GaussianPrior {
    let mean: Vec<f64> = (0..g).map(|_| rng.random_range(-0.5..0.5)).collect();
    if correlated {
        let v = spd(g, 0.05, 0.005, rng);
        GaussianPrior::new(DVector::from_vec(mean), v, Structure::Full)
    } else {
        let var: Vec<f64> = (0..g).map(|_| rng.random_range(0.005..0.1)).collect();
        GaussianPrior::diagonal(&mean, &var)
    }
}

fn objective(kind: u8, g: usize) -> Objective {
    match kind {
        0 => Objective::estimation_identity(g),
        1 => Objective::InExperimentWelfare,
        _ => Objective::PolicyChoice,
    }
}

fn random_problem(kind: u8, g: usize, correlated: bool, seed: u64) -> DesignProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = random_config(g, &mut rng);
    let prior = random_prior(g, correlated && kind == 0, &mut rng);
    DesignProblem::new(config, objective(kind, g), Prior::Gaussian(prior), ComplianceMode::Perfect).unwrap()
}

/// Solver objective against the grid oracle at resolution 0.002, normalized
/// by the largest objective magnitude seen. The grid may not beat the solver
/// by more than `1e-4`; the solver may beat the grid by at most `1e-4` plus
/// the first-order loss from the lattice spacing.
pub fn design_oracle_agreement() -> Result<(), String> {
    let res = 0.002;
    run(100, (0u8..3, 2usize..5, any::<bool>(), any::<u64>()), |(kind, g, corr, seed)| {
        let p = random_problem(kind, g, corr, seed);
        let d = ok(solve(&p))?;
        let grid = ok(grid_search_design(&p, res))?;
        let (s, sg) = (p.score(&d.propensities), p.score(&grid.propensities));
        let scale = [s, sg, p.score(&vec![p.config.lower(); g])].iter().fold(1e-12f64, |m, x| m.max(x.abs()));
        let h = 1e-6;
        let slope: f64 = (0..g)
            .map(|k| {
                let mut e = d.propensities.clone();
                e[k] = (e[k] - h).max(p.config.lower());
                let mut f = d.propensities.clone();
                f[k] = (f[k] + h).min(p.config.upper());
                ((p.score(&f) - p.score(&e)) / (f[k] - e[k])).abs()
            })
            .sum();
        ensure!(sg <= s + 1e-4 * scale, "grid {sg} beats solver {s} ({:?} vs {:?})", grid.propensities, d.propensities);
        ensure!(s - sg <= 1e-4 * scale + slope * res, "solver {s} vs grid {sg}: gap beyond lattice bound");
        Ok(())
    })
}

pub fn comparative_statics() -> Result<(), String> {
    run(200, (0.001..5.0f64, 0.001..5.0f64, 0.01..5.0f64, 20.0..400.0f64, any::<u64>()), |(v1, v2, s2, n, seed)| {
        let factor = |v: f64| v * v / ((v + s2) * (v + s2));
        let (lo, hi) = if v1 < v2 { (v1, v2) } else { (v2, v1) };
        ensure!(factor(lo) <= factor(hi), "risk factor not increasing in v");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let var = rng.random_range(0.5..2.0);
        let config = StrataConfig {
            n_strata: None,
            shares: vec![0.5, 0.5],
            costs: vec![1.0, 1.0],
            budget: rng.random_range(0.1..0.9),
            overlap: 0.05,
            var_treated: vec![var; 2],
            var_control: vec![var; 2],
            stratum_sizes: vec![n; 2],
            policy_costs: vec![],
            baseline_takeup: None,
            first_stage: None,
            reference_variance: 1.0,
        };
        let vs = [v1.max(v2), v1.min(v2)];
        let prior = Prior::Gaussian(GaussianPrior::diagonal(&[0.0, 0.0], &vs));
        let p = ok(DesignProblem::new(config.clone(), Objective::estimation_identity(2), prior, ComplianceMode::Perfect))?;
        let e = ok(solve_objective1(&p))?.propensities;
        let s = |g: usize| sampling_variance(e[g], g, &config, ComplianceMode::Perfect);
        ensure!(s(0) <= s(1) * (1.0 + 1e-6), "v1 > v2 but s1^2 {} > s2^2 {} at {e:?}", s(0), s(1));
        Ok(())
    })
}

pub fn complementary_slackness() -> Result<(), String> {
    run(150, (0u8..3, 2usize..5, any::<bool>(), any::<u64>()), |(kind, g, corr, seed)| {
        let p = random_problem(kind, g, corr, seed);
        let d = ok(solve(&p))?;
        let (a, b) = ok(p.config.budget_form(p.compliance_mode))?;
        let spent: f64 = a.iter().zip(&d.propensities).map(|(x, e)| x * e).sum();
        let binds = (b - spent).abs() <= 1e-8;
        ensure!(spent <= b + 1e-8, "budget exceeded: {spent} > {b}");
        ensure!(binds == d.binding, "binding flag {} but slack {}", d.binding, b - spent);
        ensure!((d.multiplier > 0.0) == binds, "multiplier {} with slack {}", d.multiplier, b - spent);
        Ok(())
    })
}

pub fn objective2_bang_bang() -> Result<(), String> {
    run(200, (2usize..7, any::<u64>()), |(g, seed)| {
        let p = random_problem(1, g, false, seed);
        let d = ok(solve(&p))?;
        let (lo, hi) = (p.config.lower(), p.config.upper());
        let interior = d.propensities.iter().filter(|&&e| (e - lo).abs() > 1e-12 && (e - hi).abs() > 1e-12).count();
        ensure!(interior <= 1, "{interior} interior strata in {:?}", d.propensities);
        Ok(())
    })
}

pub fn diffuse_limit_continuity() -> Result<(), String> {
    run(60, (2usize..5, any::<u64>()), |(g, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = random_config(g, &mut rng);
        let big = Prior::Gaussian(GaussianPrior::diagonal(&vec![0.0; g], &vec![1e6; g]));
        let p = ok(DesignProblem::new(config.clone(), Objective::estimation_identity(g), big, ComplianceMode::Perfect))?;
        let q = ok(DesignProblem::diffuse(config, Objective::estimation_identity(g), ComplianceMode::Perfect))?;
        let (a, b) = (ok(solve(&p))?, ok(solve(&q))?);
        for (x, y) in a.propensities.iter().zip(&b.propensities) {
            ensure!((x - y).abs() <= 1e-3, "{:?} vs diffuse {:?}", a.propensities, b.propensities);
        }
        Ok(())
    })
}

pub fn gamma_bounds() -> Result<(), String> {
    run(300, (-3.0..3.0f64, 0.0..4.0f64, 0.05..0.95f64, any::<u64>()), |(m, v, e, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = random_config(1, &mut rng);
        let val = gamma_policy(m, v, e, 0, &config);
        ensure!(val >= m.max(0.0) - 1e-15, "Gamma {val} below max(0, m) for m = {m}");
        let mut prev = gamma(m, 0.0);
        for k in 1..=100 {
            let cur = gamma(m, k as f64 * 0.05);
            ensure!(cur >= prev - 1e-15, "Gamma decreased in sigma_B at m = {m}");
            prev = cur;
        }
        Ok(())
    })
}

pub fn lipschitz_certificates() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for d in [1usize, 2, 4] {
        let mut kinds = standard_kinds(d);
        kinds.push(ContinuationKind::Quadratic { lambda: spd(d, 1.0, 0.0, &mut rng) });
        kinds.push(ContinuationKind::Portfolio { gamma: 0.7, sigma: spd(d, 1.0, 0.1, &mut rng) });
        for kind in &kinds {
            let (l, p) = kind.lipschitz();
            let testing = matches!(kind, ContinuationKind::Testing { .. });
            for _ in 0..10_000 {
                let draw = |rng: &mut ChaCha8Rng| {
                    if testing {
                        DVector::from_element(1, rng.random_range(0.0..=1.0))
                    } else {
                        DVector::from_fn(d, |_, _| 3.0 * normal(rng))
                    }
                };
                let (m, n) = (draw(&mut rng), draw(&mut rng));
                let lhs = (continuation_value(kind, &m).unwrap() - continuation_value(kind, &n).unwrap()).abs();
                let rhs = l * (1.0 + m.norm().powi(p) + n.norm().powi(p)) * (&m - &n).norm();
                if lhs > rhs * (1.0 + 1e-12) + 1e-12 {
                    return Err(format!("{}: |dPsi| = {lhs} > bound {rhs}", kind.name()));
                }
            }
        }
    }
    Ok(())
}

fn random_truth(rng: &mut ChaCha8Rng) -> Vec<Marginal> {
    (0..2)
        .map(|_| {
            if rng.random_bool(0.5) {
                Marginal::Gaussian { mean: rng.random_range(-1.0..1.0), variance: rng.random_range(0.1..3.0) }
            } else {
                let a = rng.random_range(0.3..2.0);
                Marginal::Discrete { atoms: vec![-a, 0.5 * a], weights: vec![1.0 / 3.0, 2.0 / 3.0] }
            }
        })
        .collect()
}

pub fn oracle_inequality() -> Result<(), String> {
    run(40, (any::<bool>(), any::<bool>(), 10usize..80, any::<u64>()), |(npmle, adoption, n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_truth(&mut rng);
        let template = if adoption {
            RegretTemplate::TwoStratumAdoption { n_total: 100.0, s2: 1.0, shares: [0.5, 0.5] }
        } else {
            RegretTemplate::TwoStratumQuadratic { n_total: 100.0, s2: 1.0 }
        };
        let settings = ExperimentSettings { template, lattice_points: 41, npmle_points: 30, ..ExperimentSettings::default() };
        let est = if npmle { Estimator::Npmle } else { Estimator::Gaussian };
        let r = ok(regret_experiment(&truth, &settings, est, n, seed))?;
        ensure!(r.bound_satisfied, "regret {} vs 2 Delta {}", r.regret, 2.0 * r.delta_bound);
        Ok(())
    })
}

pub fn regret_nonnegative() -> Result<(), String> {
    run(100, (any::<bool>(), any::<u64>()), |(adoption, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_truth(&mut rng);
        let template = if adoption {
            RegretTemplate::TwoStratumAdoption { n_total: 50.0, s2: 2.0, shares: [0.3, 0.7] }
        } else {
            RegretTemplate::TwoStratumQuadratic { n_total: 50.0, s2: 2.0 }
        };
        let values: Vec<f64> = (0..=100).map(|k| template.value(&truth, k as f64 / 100.0)).collect();
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ensure!(values.iter().all(|&u| best - u >= 0.0), "negative regret on the lattice");
        Ok(())
    })
}

pub fn garbling_monotonicity() -> Result<(), String> {
    run(4, (1usize..4, any::<u64>()), |(d, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = if rng.random_bool(0.5) {
            Prior::Gaussian(GaussianPrior::new(DVector::from_fn(d, |_, _| 0.3 * normal(&mut rng)), spd(d, 1.0, 0.1, &mut rng), Structure::Full))
        } else {
            Prior::Discrete(random_discrete(d, 4, &mut rng))
        };
        let study = ok(blackwell_study(&prior, &standard_kinds(d), 25, 4_000, seed))?;
        ensure!(study.violations == 0, "{} violations in {} checks", study.violations, study.checks);
        Ok(())
    })
}

pub fn two_stratum_curvature_check() -> Result<(), String> {
    run(200, (20.0..500.0f64, 0.2..4.0f64, 0.05..3.0f64, 0.05..3.0f64), |(n, s2, v1, v2)| {
        let o = two_stratum_oracle(n, s2, v1, v2);
        if !o.interior {
            return Ok(());
        }
        let (a1, a2) = (s2 / v1, s2 / v2);
        let f = |x: f64| -(s2 / (x + a1) + s2 / (n - x + a2));
        let h = 1e-2 * (n + a1.min(a2)) / 10.0;
        let numeric = (f(o.n1 + h) - 2.0 * f(o.n1) + f(o.n1 - h)) / (h * h);
        let analytic = two_stratum_curvature(n, s2, v1, v2, o.n1);
        ensure!((numeric - analytic).abs() <= 0.01 * analytic.abs(), "f'' numeric {numeric} vs analytic {analytic}");
        let m = two_stratum_modulus(n, s2, v1, v2);
        ensure!(analytic / 2.0 <= -m, "curvature {analytic} / 2 above -m = {}", -m);
        Ok(())
    })
}

pub fn reproducibility() -> Result<(), String> {
    run(6, (any::<u64>(),), |(seed,)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = Prior::Gaussian(GaussianPrior::new(DVector::from_vec(vec![0.1, -0.2]), spd(2, 1.0, 0.1, &mut rng), Structure::Full));
        let sigma = spd(2, 1.0, 0.2, &mut rng);
        let kind = ContinuationKind::Selection;
        let pool = |n: usize| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        let a = ok(pool(1).install(|| mc_value(&prior, &sigma, &kind, 10_000, seed)))?;
        let b = ok(pool(3).install(|| mc_value(&prior, &sigma, &kind, 10_000, seed)))?;
        ensure!(a == b, "ValueEstimate differs across thread counts");
        let truth = random_truth(&mut rng);
        let settings = ExperimentSettings { lattice_points: 21, npmle_points: 20, ..ExperimentSettings::default() };
        for est in [Estimator::Gaussian, Estimator::Npmle] {
            let r1 = ok(pool(1).install(|| regret_experiment(&truth, &settings, est, 30, seed)))?;
            let r2 = ok(pool(3).install(|| regret_experiment(&truth, &settings, est, 30, seed)))?;
            ensure!(r1 == r2, "RegretResult differs for {est:?}");
        }
        Ok(())
    })
}

pub fn archive_round_trip() -> Result<(), String> {
    run(60, (1usize..15, 1usize..4, any::<u64>()), |(n, d, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let studies: Vec<StudySummary> = (0..n)
            .map(|i| {
                let coords: Vec<usize> = if i < d || rng.random_bool(0.5) {
                    (0..d).collect()
                } else {
                    vec![rng.random_range(0..d)]
                };
                let est: Vec<f64> = coords.iter().map(|_| normal(&mut rng) / 3.0).collect();
                let se: Vec<f64> = coords.iter().map(|_| rng.random_range(0.01..2.0)).collect();
                let mut s = StudySummary::selection(format!("study-{i}"), d, &coords, &est, &se);
                if s.k() > 1 && rng.random_bool(0.5) {
                    let c = spd(s.k(), 0.3, 0.05, &mut rng);
                    s.covariance = c;
                }
                s
            })
            .collect();
        let archive = ok(StudyArchive::new(studies, d))?;
        let mut buf = Vec::new();
        ok(write_archive(&archive, &mut buf))?;
        let back = ok(parse_archive(buf.as_slice(), "memory", d))?;
        ensure!(back.len() == n, "grouping produced {} studies from {n} ids", back.len());
        ensure!(back == archive, "round trip changed the archive");
        ensure!(validate_archive(&back).iter().all(|x| x.severity != Severity::Error), "accepted archive has errors");
        Ok(())
    })
}
