use nalgebra::{DMatrix, DVector};

use super::optim::{golden_section_max, nelder_mead, numerical_gradient, numerical_hessian};
use super::{FitReport, GaussianPrior, OptimizerOptions, Structure};
use crate::error::{Error, Result};
use crate::linalg::{self, CholFactor};
use crate::normal::LN_2PI;
use crate::study_data::StudyArchive;

/// Floor for log-variance and log-Cholesky diagonal parameters.
const LOG_FLOOR: f64 = -30.0;

struct Gls {
    tau: DVector<f64>,
    loglik: f64,
}

fn gls(archive: &StudyArchive, v: &DMatrix<f64>) -> Result<Gls> {
    let g = archive.dimension;
    let mut info = DMatrix::<f64>::zeros(g, g);
    let mut score = DVector::<f64>::zeros(g);
    let mut factors = Vec::with_capacity(archive.len());
    for s in &archive.studies {
        let r = &s.reporting_operator;
        let m = &s.covariance + r * v * r.transpose();
        let chol = CholFactor::new(&m).map_err(|_| {
            Error::Numerical(format!("study {}: marginal covariance not positive definite", s.study_id))
        })?;
        let minv_r = chol.solve(r);
        info += r.transpose() * &minv_r;
        score += minv_r.transpose() * &s.estimate;
        factors.push(chol);
    }
    let info = linalg::symmetrize(&info);
    let eig = info.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let null: Vec<usize> = (0..g)
        .filter(|&j| {
            (0..g).any(|k| eig.eigenvalues[k] <= 1e-12 * max.max(f64::MIN_POSITIVE) && eig.eigenvectors[(j, k)].abs() > 1e-6)
        })
        .collect();
    if max <= 0.0 || !null.is_empty() {
        let coords: Vec<String> = null.iter().map(|j| (j + 1).to_string()).collect();
        return Err(Error::Identification(format!(
            "information matrix singular; null space touches coordinates [{}]",
            coords.join(", ")
        )));
    }
    let tau = CholFactor::new(&info)?.solve_vec(&score);
    let mut loglik = 0.0;
    for (s, chol) in archive.studies.iter().zip(&factors) {
        let resid = &s.estimate - &s.reporting_operator * &tau;
        loglik -= 0.5 * (s.k() as f64 * LN_2PI + chol.logdet() + chol.quad_form(&resid));
    }
    Ok(Gls { tau, loglik })
}

fn check_v(archive: &StudyArchive, v: &DMatrix<f64>) -> Result<()> {
    let g = archive.dimension;
    if v.nrows() != g || v.ncols() != g {
        return Err(Error::Invalid(format!("V must be {g}x{g}")));
    }
    Ok(())
}

/// GLS estimate of the prior mean given the prior covariance `v`.
pub fn gls_mean(archive: &StudyArchive, v: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_v(archive, v)?;
    Ok(gls(archive, v)?.tau)
}

/// Profile log-likelihood of `v` with the mean concentrated out.
pub fn profile_loglik(archive: &StudyArchive, v: &DMatrix<f64>) -> Result<f64> {
    check_v(archive, v)?;
    Ok(gls(archive, v)?.loglik)
}

/// Moment-based starting covariance: sample covariance of implied full
/// estimates minus their mean sampling covariance, projected to PSD.
/// Coordinates with fewer than two full-reporting studies fall back to
/// single-coordinate reports for their variance.
pub fn method_of_moments_start(archive: &StudyArchive) -> DMatrix<f64> {
    let g = archive.dimension;
    let full: Vec<(DVector<f64>, DMatrix<f64>)> = archive.studies.iter().filter_map(|s| s.implied_full()).collect();
    let mut v = DMatrix::zeros(g, g);
    if full.len() >= 2 {
        let n = full.len() as f64;
        let mean = full.iter().fold(DVector::zeros(g), |acc, (t, _)| acc + t) / n;
        let mut s = DMatrix::zeros(g, g);
        let mut sig = DMatrix::zeros(g, g);
        for (t, c) in &full {
            let r = t - &mean;
            s += &r * r.transpose();
            sig += c;
        }
        v = linalg::psd_project(&(s / (n - 1.0) - sig / n));
    }
    let per_coord = archive.implied_by_coordinate();
    for (j, (est, se)) in per_coord.iter().enumerate() {
        if full.len() >= 2 || est.len() < 2 {
            continue;
        }
        let n = est.len() as f64;
        let mean = est.iter().sum::<f64>() / n;
        let var = est.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let noise = se.iter().map(|s| s * s).sum::<f64>() / n;
        v[(j, j)] = (var - noise).max(0.0);
    }
    v
}

fn typical_noise(archive: &StudyArchive) -> Vec<f64> {
    archive
        .implied_by_coordinate()
        .into_iter()
        .map(|(_, se)| {
            if se.is_empty() {
                1.0
            } else {
                se.iter().map(|s| s * s).sum::<f64>() / se.len() as f64
            }
        })
        .collect()
}

fn spread_scale(archive: &StudyArchive) -> f64 {
    archive
        .implied_by_coordinate()
        .into_iter()
        .map(|(est, se)| {
            let n = est.len().max(1) as f64;
            let mean = est.iter().sum::<f64>() / n;
            let var = est.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            var + se.iter().map(|s| s * s).sum::<f64>() / n
        })
        .fold(0.0, f64::max)
        .max(1e-12)
}

fn chol_params_to_v(p: &[f64], g: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(g, g);
    let mut k = 0;
    for i in 0..g {
        for j in 0..=i {
            l[(i, j)] = if i == j { p[k].max(LOG_FLOOR).exp() } else { p[k] };
            k += 1;
        }
    }
    &l * l.transpose()
}

fn v_to_chol_params(v: &DMatrix<f64>, floor: &[f64]) -> Vec<f64> {
    let g = v.nrows();
    let start = v + DMatrix::from_diagonal(&DVector::from_column_slice(floor));
    let l = match linalg::symmetrize(&start).cholesky() {
        Some(c) => c.l(),
        None => DMatrix::from_diagonal(&start.diagonal().map(|x| x.max(1e-300).sqrt())),
    };
    let mut p = Vec::with_capacity(g * (g + 1) / 2);
    for i in 0..g {
        for j in 0..=i {
            p.push(if i == j { l[(i, i)].max(1e-300).ln().max(LOG_FLOOR) } else { l[(i, j)] });
        }
    }
    p
}

/// Numerical gradient of the profile log-likelihood in the log-Cholesky
/// coordinates used by the full-structure fit (`v` must be positive definite).
pub fn profile_gradient_log_cholesky(archive: &StudyArchive, v: &DMatrix<f64>) -> Result<Vec<f64>> {
    let g = archive.dimension;
    let p = v_to_chol_params(v, &vec![0.0; g]);
    let f = |q: &[f64]| profile_loglik(archive, &chol_params_to_v(q, g)).unwrap_or(f64::NEG_INFINITY);
    Ok(numerical_gradient(&f, &p, 1e-5))
}

/// Maximize the profile likelihood over the declared structure of `V`.
pub fn fit_gaussian_prior(archive: &StudyArchive, structure: Structure, options: &OptimizerOptions) -> Result<(GaussianPrior, FitReport)> {
    // Fail early on an unidentified archive.
    let start = method_of_moments_start(archive);
    gls(archive, &start)?;
    let (v, iterations, converged, trajectory) = match structure {
        Structure::Diagonal => fit_diagonal(archive, &start, options),
        Structure::Full => fit_full(archive, &start, options),
    };
    let v = match structure {
        Structure::Diagonal => DMatrix::from_diagonal(&v.diagonal().map(|x| x.max(0.0))),
        Structure::Full if linalg::sym_eigenvalues(&v)[0] < 0.0 => linalg::psd_project(&v),
        Structure::Full => linalg::symmetrize(&v),
    };
    let fit = gls(archive, &v)?;
    let mut trajectory = trajectory;
    trajectory.push(fit.loglik);
    Ok((
        GaussianPrior::new(fit.tau, v, structure),
        FitReport { loglik: fit.loglik, iterations, converged, trajectory },
    ))
}

fn ll_or_neg_inf(archive: &StudyArchive, v: &DMatrix<f64>) -> f64 {
    profile_loglik(archive, v).unwrap_or(f64::NEG_INFINITY)
}

fn fit_diagonal(archive: &StudyArchive, start: &DMatrix<f64>, options: &OptimizerOptions) -> (DMatrix<f64>, usize, bool, Vec<f64>) {
    let g = archive.dimension;
    let upper = (100.0 * spread_scale(archive)).ln();
    let mut logv: Vec<f64> = (0..g).map(|i| start[(i, i)].max(1e-300).ln().clamp(LOG_FLOOR, upper)).collect();
    let to_v = |p: &[f64]| DMatrix::from_diagonal(&DVector::from_iterator(g, p.iter().map(|x| x.max(LOG_FLOOR).exp())));
    let mut current = ll_or_neg_inf(archive, &to_v(&logv));
    let mut trajectory = vec![current];
    let mut converged = false;
    let mut sweeps = 0;
    let max_sweeps = options.max_iterations.min(500);
    while sweeps < max_sweeps {
        sweeps += 1;
        let before = current;
        for j in 0..g {
            let f = |x: f64| {
                let mut p = logv.clone();
                p[j] = x;
                ll_or_neg_inf(archive, &to_v(&p))
            };
            let (x, fx) = golden_section_max(f, LOG_FLOOR, upper, 1e-9);
            if fx >= current {
                logv[j] = x;
                current = fx;
            }
        }
        trajectory.push(current);
        let gain = current - before;
        if gain < options.tolerance * 1e-6 {
            converged = gain < options.tolerance;
            break;
        }
    }
    let mut v = to_v(&logv);
    snap_to_boundary(archive, &mut v, &mut current);
    (v, sweeps, converged, trajectory)
}

/// Zero out coordinates whose variance sits at the boundary if that does not
/// lower the likelihood.
fn snap_to_boundary(archive: &StudyArchive, v: &mut DMatrix<f64>, current: &mut f64) {
    let g = v.nrows();
    let scale = spread_scale(archive);
    for j in 0..g {
        if v[(j, j)] > 1e-8 * scale {
            continue;
        }
        let mut w = v.clone();
        for k in 0..g {
            w[(j, k)] = 0.0;
            w[(k, j)] = 0.0;
        }
        let ll = ll_or_neg_inf(archive, &w);
        if ll >= *current {
            *v = w;
            *current = ll;
        }
    }
}

fn fit_full(archive: &StudyArchive, start: &DMatrix<f64>, options: &OptimizerOptions) -> (DMatrix<f64>, usize, bool, Vec<f64>) {
    let g = archive.dimension;
    let floor: Vec<f64> = typical_noise(archive).iter().map(|s| 0.05 * s).collect();
    let f = |q: &[f64]| ll_or_neg_inf(archive, &chol_params_to_v(q, g));
    let mut p = v_to_chol_params(start, &floor);
    let mut trajectory = Vec::new();
    let mut iterations = 0;
    let mut best = f(&p);
    for _restart in 0..8 {
        let r = nelder_mead(&f, &p, 0.5, options.max_iterations, 1e-13);
        iterations += r.iterations;
        trajectory.extend(r.trajectory);
        let improved = r.value - best;
        if r.value >= best {
            p = r.x;
            best = r.value;
        }
        if improved.abs() < 1e-10 {
            break;
        }
    }
    // Newton polish on finite differences so the returned point is stationary.
    let mut converged = false;
    for _ in 0..100 {
        iterations += 1;
        let grad = numerical_gradient(&f, &p, 1e-5);
        let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < options.tolerance {
            converged = true;
            break;
        }
        let h = numerical_hessian(&f, &p, 1e-4);
        let n = p.len();
        let hm = DMatrix::from_fn(n, n, |i, j| -h[i][j]);
        let gv = DVector::from_vec(grad.clone());
        let mut step = match linalg::symmetrize(&hm).cholesky() {
            Some(c) => c.solve(&gv),
            None => gv.clone() / (hm.amax().max(1.0)),
        };
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let fc = f(&cand);
            if fc >= best {
                p = cand;
                best = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trajectory.push(best);
        if !accepted {
            break;
        }
    }
    let mut v = chol_params_to_v(&p, g);
    snap_to_boundary(archive, &mut v, &mut best);
    (v, iterations, converged, trajectory)
}
