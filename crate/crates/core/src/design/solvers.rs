use nalgebra::DMatrix;

use super::objectives::{gamma_policy, gamma_policy_derivative, objective1_gradient};
use super::separable::{self, Stratum};
use super::{sampling_variance, sampling_variance_derivative, Design, DesignPrior, DesignProblem, Objective};
use crate::config::ComplianceMode;
use crate::error::{Error, Result};
use crate::prior::GaussianPrior;

const BIND_TOL: f64 = 1e-8;

/// Dispatch on the problem's objective.
pub fn solve(problem: &DesignProblem) -> Result<Design> {
    match problem.objective {
        Objective::EstimationQuadratic { .. } => solve_objective1(problem),
        Objective::InExperimentWelfare => solve_objective2(problem),
        Objective::PolicyChoice => solve_objective3(problem),
    }
}

fn finish(problem: &DesignProblem, e: Vec<f64>, multiplier: f64, binding: bool) -> Design {
    let objective_value = problem.evaluate(&e);
    Design { propensities: e, objective_value, multiplier, binding }
}

/// Risk-minimizing design for the estimation objective.
pub fn solve_objective1(problem: &DesignProblem) -> Result<Design> {
    problem.validate()?;
    let (l, lambda) = match &problem.objective {
        Objective::EstimationQuadratic { l, lambda } => (l, lambda),
        _ => return Err(Error::Invalid("solve_objective1 needs the estimation objective".into())),
    };
    let cfg = &problem.config;
    let (a, b) = cfg.budget_form(problem.compliance_mode)?;
    let (lo, hi) = (cfg.lower(), cfg.upper());
    let prior = problem.gaussian_prior();
    let m = l.transpose() * lambda * l;
    let separable_case = prior.as_ref().is_none_or(|p| p.is_diagonal());
    if separable_case {
        let strata: Vec<Stratum> = (0..cfg.n())
            .map(|g| {
                let w = m[(g, g)];
                let v = prior.as_ref().map(|p| p.covariance[(g, g)]);
                let f = move |s2: f64| match v {
                    None => s2,
                    Some(v) if v > 0.0 => v * s2 / (v + s2),
                    Some(_) => 0.0,
                };
                let df = move |s2: f64| match v {
                    None => 1.0,
                    Some(v) if v > 0.0 => (v / (v + s2)).powi(2),
                    Some(_) => 0.0,
                };
                Stratum {
                    value: Box::new(move |e: f64| -w * f(sampling_variance(e, g, cfg, ComplianceMode::Perfect))),
                    deriv: Box::new(move |e: f64| {
                        -w * df(sampling_variance(e, g, cfg, ComplianceMode::Perfect)) * sampling_variance_derivative(e, g, cfg)
                    }),
                    cost: a[g],
                }
            })
            .collect();
        let sol = separable::solve(&strata, b, lo, hi);
        return Ok(finish(problem, sol.e, sol.multiplier, sol.binding));
    }
    let prior = prior.expect("non-separable case has a prior");
    let (e, multiplier, binding) = projected_gradient(&prior, l, lambda, problem, &a, b)?;
    Ok(finish(problem, e, multiplier, binding))
}

/// Euclidean projection onto `{lo <= e <= hi, a'e <= b}`.
pub(crate) fn project(z: &[f64], a: &[f64], b: f64, lo: f64, hi: f64) -> Vec<f64> {
    let clip = |mu: f64| -> Vec<f64> { z.iter().zip(a).map(|(zi, ai)| (zi - mu * ai).clamp(lo, hi)).collect() };
    let cost = |e: &[f64]| -> f64 { e.iter().zip(a).map(|(x, y)| x * y).sum() };
    let p0 = clip(0.0);
    if cost(&p0) <= b {
        return p0;
    }
    let mut mu_hi = 1.0;
    for _ in 0..2000 {
        if cost(&clip(mu_hi)) <= b {
            break;
        }
        mu_hi *= 2.0;
    }
    let mut mu_lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (mu_lo + mu_hi);
        if mid <= mu_lo || mid >= mu_hi {
            break;
        }
        if cost(&clip(mid)) > b {
            mu_lo = mid;
        } else {
            mu_hi = mid;
        }
    }
    clip(mu_hi)
}

fn projected_gradient(
    prior: &GaussianPrior,
    l: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    problem: &DesignProblem,
    a: &[f64],
    b: f64,
) -> Result<(Vec<f64>, f64, bool)> {
    let cfg = &problem.config;
    let (lo, hi) = (cfg.lower(), cfg.upper());
    let g = cfg.n();
    let risk = |e: &[f64]| problem.evaluate(e);
    let grad = |e: &[f64]| objective1_gradient(e, Some(prior), l, lambda, cfg);
    let total_a: f64 = a.iter().sum();
    let common = if total_a > 0.0 { b / total_a } else { hi };
    let mut e = project(&vec![common.clamp(lo, hi); g], a, b, lo, hi);
    let mut r = risk(&e);
    let g0 = grad(&e);
    let gmax = g0.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut t = if gmax > 0.0 { 0.1 / gmax } else { 1.0 };
    let mut converged = false;
    for _ in 0..50_000 {
        let gr = grad(&e);
        let mut accepted = None;
        for _ in 0..80 {
            let z: Vec<f64> = e.iter().zip(&gr).map(|(x, d)| x - t * d).collect();
            let z = project(&z, a, b, lo, hi);
            let d: Vec<f64> = z.iter().zip(&e).map(|(x, y)| x - y).collect();
            let rz = risk(&z);
            let lin: f64 = gr.iter().zip(&d).map(|(x, y)| x * y).sum();
            let quad: f64 = d.iter().map(|x| x * x).sum::<f64>() / (2.0 * t);
            if rz <= r + lin + quad + 1e-15 * r.abs() {
                accepted = Some((z, rz, d));
                break;
            }
            t *= 0.5;
        }
        let Some((z, rz, d)) = accepted else {
            return Err(Error::Numerical("projected gradient line search failed".into()));
        };
        let step = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let gain = r - rz;
        e = z;
        r = rz;
        if step < 1e-12 || (step < 1e-8 && gain <= 1e-15 * r.abs()) {
            converged = true;
            break;
        }
        t *= 1.5;
    }
    if !converged {
        return Err(Error::Numerical("projected gradient did not converge".into()));
    }
    let cost: f64 = e.iter().zip(a).map(|(x, y)| x * y).sum();
    let binding = (cost - b).abs() < BIND_TOL;
    let mut multiplier = 0.0;
    if binding {
        let gr = grad(&e);
        let free: Vec<f64> = (0..g)
            .filter(|&k| a[k] > 0.0 && e[k] > lo + 1e-9 && e[k] < hi - 1e-9)
            .map(|k| -gr[k] / a[k])
            .collect();
        multiplier = if free.is_empty() {
            (0..g).filter(|&k| a[k] > 0.0).map(|k| (-gr[k] / a[k]).max(0.0)).fold(0.0, f64::max)
        } else {
            free.iter().sum::<f64>() / free.len() as f64
        };
    }
    Ok((e, multiplier.max(0.0), binding))
}

fn common_propensity(problem: &DesignProblem) -> Result<Design> {
    let cfg = &problem.config;
    let (a, b) = cfg.budget_form(problem.compliance_mode)?;
    let total: f64 = a.iter().sum();
    let e_bar = if total > 0.0 { (b / total).clamp(cfg.lower(), cfg.upper()) } else { cfg.upper() };
    let e = vec![e_bar; cfg.n()];
    let binding = (a.iter().map(|x| x * e_bar).sum::<f64>() - b).abs() < BIND_TOL;
    Ok(finish(problem, e, 0.0, binding))
}

/// Bang-bang design for the in-experiment welfare objective.
pub fn solve_objective2(problem: &DesignProblem) -> Result<Design> {
    problem.validate()?;
    if problem.objective != Objective::InExperimentWelfare {
        return Err(Error::Invalid("solve_objective2 needs the welfare objective".into()));
    }
    let cfg = &problem.config;
    let slopes = problem.welfare_slopes();
    if slopes.iter().all(|&s| s == 0.0) {
        return common_propensity(problem);
    }
    let (a, b) = cfg.budget_form(problem.compliance_mode)?;
    let (lo, hi) = (cfg.lower(), cfg.upper());
    let g = cfg.n();
    let mut e = vec![lo; g];
    let mut remaining = b - a.iter().map(|x| x * lo).sum::<f64>();
    for k in 0..g {
        if a[k] == 0.0 && slopes[k] > 0.0 {
            e[k] = hi;
        }
    }
    let mut order: Vec<usize> = (0..g).filter(|&k| a[k] > 0.0 && slopes[k] > 0.0).collect();
    order.sort_by(|&x, &y| (slopes[y] / a[y]).total_cmp(&(slopes[x] / a[x])).then(x.cmp(&y)));
    let mut last_ratio = 0.0;
    for &k in &order {
        if remaining <= 0.0 {
            break;
        }
        let need = a[k] * (hi - lo);
        last_ratio = slopes[k] / a[k];
        if need <= remaining {
            e[k] = hi;
            remaining -= need;
        } else {
            e[k] = lo + remaining / a[k];
            remaining = 0.0;
        }
    }
    let binding = remaining.abs() < BIND_TOL;
    Ok(finish(problem, e, if binding { last_ratio } else { 0.0 }, binding))
}

/// Welfare-maximizing design for the post-experiment adoption objective.
pub fn solve_objective3(problem: &DesignProblem) -> Result<Design> {
    problem.validate()?;
    if problem.objective != Objective::PolicyChoice {
        return Err(Error::Invalid("solve_objective3 needs the policy objective".into()));
    }
    let cfg = &problem.config;
    let (a, b) = cfg.budget_form(problem.compliance_mode)?;
    let moments = problem.stratum_moments();
    let strata: Vec<Stratum> = moments
        .iter()
        .enumerate()
        .map(|(g, &(m, v))| {
            let p = cfg.shares[g];
            Stratum {
                value: Box::new(move |e: f64| p * gamma_policy(m, v, e, g, cfg)),
                deriv: Box::new(move |e: f64| p * gamma_policy_derivative(m, v, e, g, cfg)),
                cost: a[g],
            }
        })
        .collect();
    let sol = separable::solve(&strata, b, cfg.lower(), cfg.upper());
    Ok(finish(problem, sol.e, sol.multiplier, sol.binding))
}

/// Benchmark design that ignores the archive: diffuse prior (estimation),
/// common propensity (welfare), zero means with the reference variance
/// (policy). The reported objective value is evaluated under the problem's
/// own prior.
pub fn no_information_design(problem: &DesignProblem) -> Result<Design> {
    let mut reference = problem.clone();
    reference.prior = DesignPrior::Diffuse;
    let d = match problem.objective {
        Objective::EstimationQuadratic { .. } => solve_objective1(&reference)?,
        Objective::InExperimentWelfare => common_propensity(&reference)?,
        Objective::PolicyChoice => solve_objective3(&reference)?,
    };
    Ok(Design { objective_value: problem.evaluate(&d.propensities), ..d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StrataConfig;
    use crate::prior::Prior;

    fn drug(n: f64) -> StrataConfig {
        StrataConfig {
            n_strata: None,
            shares: vec![0.5, 0.5],
            costs: vec![2.0, 2.0],
            budget: 0.5,
            overlap: 0.05,
            var_treated: vec![1.0, 1.0],
            var_control: vec![1.0, 1.0],
            stratum_sizes: vec![n, n],
            policy_costs: vec![],
            baseline_takeup: None,
            first_stage: None,
            reference_variance: 1.0,
        }
    }

    #[test]
    fn diffuse_drug_design_is_balanced() {
        let p = DesignProblem::diffuse(drug(200.0), Objective::estimation_identity(2), ComplianceMode::Perfect).unwrap();
        let d = solve_objective1(&p).unwrap();
        assert!((d.propensities[0] - 0.25).abs() < 1e-9 && (d.propensities[1] - 0.25).abs() < 1e-9);
        assert!(d.binding && d.multiplier > 0.0);
    }

    #[test]
    fn projection_is_feasible_and_idempotent() {
        let a = [1.0, 2.0, 0.5];
        let p = project(&[0.9, 0.9, 0.9], &a, 1.0, 0.05, 0.95);
        let c: f64 = p.iter().zip(&a).map(|(x, y)| x * y).sum();
        assert!(c <= 1.0 + 1e-12);
        let q = project(&p, &a, 1.0, 0.05, 0.95);
        assert!(p.iter().zip(&q).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn welfare_sign_driven_bang_bang() {
        let mut c = drug(100.0);
        c.budget = 10.0;
        let prior = Prior::Gaussian(GaussianPrior::diagonal(&[1.0, -1.0], &[1.0, 1.0]));
        let p = DesignProblem::new(c, Objective::InExperimentWelfare, prior, ComplianceMode::Perfect).unwrap();
        let d = solve_objective2(&p).unwrap();
        assert_eq!(d.propensities, vec![0.95, 0.05]);
        assert!(!d.binding);
        assert_eq!(d.multiplier, 0.0);
    }

    #[test]
    fn welfare_flat_returns_common_propensity() {
        let prior = Prior::Gaussian(GaussianPrior::diagonal(&[0.0, 0.0], &[1.0, 1.0]));
        let p = DesignProblem::new(drug(100.0), Objective::InExperimentWelfare, prior, ComplianceMode::Perfect).unwrap();
        let d = solve_objective2(&p).unwrap();
        assert!((d.propensities[0] - 0.25).abs() < 1e-15 && (d.propensities[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn symmetric_policy_problem_is_symmetric() {
        let prior = Prior::Gaussian(GaussianPrior::diagonal(&[0.01, 0.01], &[0.02, 0.02]));
        let p = DesignProblem::new(drug(100.0), Objective::PolicyChoice, prior, ComplianceMode::Perfect).unwrap();
        let d = solve_objective3(&p).unwrap();
        assert!((d.propensities[0] - d.propensities[1]).abs() < 1e-9, "{:?}", d.propensities);
    }

    #[test]
    fn drug_design_tilts_toward_less_certain_stratum() {
        let prior = Prior::Gaussian(GaussianPrior::diagonal(&[0.236, 0.114], &[0.017, 0.020]));
        let p = DesignProblem::new(drug(200.0), Objective::estimation_identity(2), prior, ComplianceMode::Perfect).unwrap();
        let d = solve_objective1(&p).unwrap();
        assert!((d.propensities[0] - 0.229).abs() < 0.01 && (d.propensities[1] - 0.271).abs() < 0.01, "{:?}", d.propensities);
        let grid = super::super::grid_search_design(&p, 0.001).unwrap();
        assert!((grid.propensities[0] - d.propensities[0]).abs() < 0.002);
        assert!(grid.objective_value >= d.objective_value - 1e-12);
    }

    #[test]
    fn correlated_prior_uses_projected_gradient() {
        let v = DMatrix::from_row_slice(2, 2, &[0.017, 0.006, 0.006, 0.020]);
        let prior = Prior::Gaussian(GaussianPrior::new(nalgebra::DVector::from_vec(vec![0.2, 0.1]), v, crate::prior::Structure::Full));
        let p = DesignProblem::new(drug(200.0), Objective::estimation_identity(2), prior, ComplianceMode::Perfect).unwrap();
        let d = solve_objective1(&p).unwrap();
        let grid = super::super::grid_search_design(&p, 0.001).unwrap();
        assert!(d.binding && d.multiplier > 0.0);
        assert!(grid.objective_value >= d.objective_value - 1e-12, "{} {}", grid.objective_value, d.objective_value);
        assert!((grid.propensities[0] - d.propensities[0]).abs() < 0.002, "{:?} {:?}", grid.propensities, d.propensities);
    }
}
