//! Brute-force lattice oracle for the design solvers.

use rayon::prelude::*;

use super::objectives::gamma_policy;
use super::{sampling_variance, Design, DesignProblem, Objective};
use crate::config::ComplianceMode;
use crate::error::{Error, Result};

/// Largest lattice searched exhaustively; larger ones use pairwise sweeps.
const EXHAUSTIVE_LIMIT: f64 = 2.0e6;

enum Evaluator {
    /// Score is a sum of per-coordinate lattice values.
    Separable(Vec<Vec<f64>>),
    /// Negative risk `-(tr(MV) - tr((V + S)^{-1} V M V))` with diagonal `S`.
    Quadratic { tr_mv: f64, v: Vec<f64>, w: Vec<f64>, s2: Vec<Vec<f64>> },
}

impl Evaluator {
    fn score(&self, idx: &[usize]) -> f64 {
        match self {
            Evaluator::Separable(vals) => idx.iter().enumerate().map(|(g, &k)| vals[g][k]).sum(),
            Evaluator::Quadratic { tr_mv, v, w, s2 } => {
                let n = idx.len();
                let mut a = v.clone();
                for g in 0..n {
                    a[g * n + g] += s2[g][idx[g]];
                }
                -(tr_mv - trace_solve(&mut a, w, n))
            }
        }
    }
}

/// `tr(A^{-1} W)` for small symmetric positive definite `A` (row-major,
/// overwritten by its Cholesky factor).
fn trace_solve(a: &mut [f64], w: &[f64], n: usize) -> f64 {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        let d = d.max(f64::MIN_POSITIVE).sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut tr = 0.0;
    let mut x = vec![0.0; n];
    for c in 0..n {
        // Solve L L' x = w[:, c] and accumulate x[c].
        for i in 0..n {
            let mut s = w[i * n + c];
            for k in 0..i {
                s -= a[i * n + k] * x[k];
            }
            x[i] = s / a[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= a[k * n + i] * x[k];
            }
            x[i] = s / a[i * n + i];
        }
        tr += x[c];
    }
    tr
}

fn lattice(lo: f64, hi: f64, resolution: f64) -> Vec<f64> {
    let steps = ((hi - lo) / resolution + 1e-9).floor() as usize;
    let mut pts: Vec<f64> = (0..=steps).map(|k| lo + k as f64 * resolution).collect();
    if hi - pts[steps] > 1e-12 {
        pts.push(hi);
    } else {
        pts[steps] = hi;
    }
    pts
}

fn evaluator(problem: &DesignProblem, pts: &[f64]) -> Evaluator {
    let cfg = &problem.config;
    let g = cfg.n();
    let s2 = |k: usize| -> Vec<f64> { pts.iter().map(|&e| sampling_variance(e, k, cfg, ComplianceMode::Perfect)).collect() };
    match &problem.objective {
        Objective::EstimationQuadratic { l, lambda } => {
            let m = l.transpose() * lambda * l;
            let m = (&m + m.transpose()) * 0.5;
            match problem.gaussian_prior() {
                None => Evaluator::Separable((0..g).map(|k| s2(k).iter().map(|s| -m[(k, k)] * s).collect()).collect()),
                Some(p) if p.is_diagonal() => Evaluator::Separable(
                    (0..g)
                        .map(|k| {
                            let v = p.covariance[(k, k)];
                            s2(k).iter().map(|s| if v > 0.0 { -m[(k, k)] * v * s / (v + s) } else { 0.0 }).collect()
                        })
                        .collect(),
                ),
                Some(p) => {
                    let v = &p.covariance;
                    let w = v * &m * v;
                    let w = (&w + w.transpose()) * 0.5;
                    Evaluator::Quadratic {
                        tr_mv: (&m * v).trace(),
                        v: (0..g * g).map(|i| v[(i / g, i % g)]).collect(),
                        w: (0..g * g).map(|i| w[(i / g, i % g)]).collect(),
                        s2: (0..g).map(s2).collect(),
                    }
                }
            }
        }
        Objective::InExperimentWelfare => {
            let slopes = problem.welfare_slopes();
            Evaluator::Separable(slopes.iter().map(|b| pts.iter().map(|e| b * e).collect()).collect())
        }
        Objective::PolicyChoice => Evaluator::Separable(
            problem
                .stratum_moments()
                .iter()
                .enumerate()
                .map(|(k, &(m, v))| pts.iter().map(|&e| cfg.shares[k] * gamma_policy(m, v, e, k, cfg)).collect())
                .collect(),
        ),
    }
}

/// Best feasible point of the lattice `{lo, lo + r, ..., hi}^G`, by
/// exhaustive search when the lattice is small and by pairwise coordinate
/// sweeps from the all-`lo` design otherwise. Ties go to the first point in
/// lexicographic order.
pub fn grid_search_design(problem: &DesignProblem, resolution: f64) -> Result<Design> {
    problem.validate()?;
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::Invalid("resolution must be positive".into()));
    }
    let cfg = &problem.config;
    let (lo, hi) = (cfg.lower(), cfg.upper());
    let (a, b) = cfg.budget_form(problem.compliance_mode)?;
    let pts = lattice(lo, hi, resolution);
    let k = pts.len();
    let g = cfg.n();
    let eval = evaluator(problem, &pts);
    let feasible = |idx: &[usize]| idx.iter().zip(&a).map(|(&i, ai)| ai * pts[i]).sum::<f64>() <= b + 1e-9;

    let best = if (k as f64).powi(g as i32) <= EXHAUSTIVE_LIMIT {
        let total = k.pow(g as u32);
        (0..total)
            .into_par_iter()
            .filter_map(|flat| {
                let mut idx = vec![0usize; g];
                let mut r = flat;
                for d in (0..g).rev() {
                    idx[d] = r % k;
                    r /= k;
                }
                feasible(&idx).then(|| (eval.score(&idx), flat, idx))
            })
            .reduce_with(|x, y| if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x })
            .map(|(_, _, idx)| idx)
            .ok_or_else(|| Error::Invalid("no feasible lattice point".into()))?
    } else {
        pairwise_sweeps(&eval, &feasible, g, k)
    };
    let e: Vec<f64> = best.iter().map(|&i| pts[i]).collect();
    let spent: f64 = e.iter().zip(&a).map(|(x, y)| x * y).sum();
    let step = a.iter().fold(0.0f64, |m, x| m.max(*x)) * resolution;
    Ok(Design { objective_value: problem.evaluate(&e), binding: b - spent <= step, propensities: e, multiplier: 0.0 })
}

fn pairwise_sweeps(eval: &Evaluator, feasible: &(dyn Fn(&[usize]) -> bool + Sync), g: usize, k: usize) -> Vec<usize> {
    let mut idx = vec![0usize; g];
    let mut current = eval.score(&idx);
    for _ in 0..200 {
        let mut improved = false;
        for i in 0..g {
            for j in (i + 1)..g.max(i + 2) {
                let cand = (0..k)
                    .into_par_iter()
                    .filter_map(|ki| {
                        let mut t = idx.clone();
                        t[i] = ki;
                        let range = if j < g { 0..k } else { 0..1 };
                        let mut best: Option<(f64, usize, usize)> = None;
                        for kj in range {
                            if j < g {
                                t[j] = kj;
                            }
                            if !feasible(&t) {
                                continue;
                            }
                            let s = eval.score(&t);
                            if best.is_none_or(|b| s > b.0) {
                                best = Some((s, ki, kj));
                            }
                        }
                        best
                    })
                    .reduce_with(|x, y| if y.0 > x.0 || (y.0 == x.0 && (y.1, y.2) < (x.1, x.2)) { y } else { x });
                if let Some((s, ki, kj)) = cand {
                    if s > current + 1e-15 * current.abs().max(1e-300) {
                        idx[i] = ki;
                        if j < g {
                            idx[j] = kj;
                        }
                        current = s;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    idx
}
