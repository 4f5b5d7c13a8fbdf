use nalgebra::DVector;
use rayon::prelude::*;

use super::{DiscretePrior, FitReport, OptimizerOptions};
use crate::error::{Error, Result};
use crate::linalg::CholFactor;
use crate::study_data::StudyArchive;

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

/// Per-coordinate grid `[min - pad*s, max + pad*s]` with `s` the median SE.
fn coordinate_grids(archive: &StudyArchive, points: usize, padding: f64) -> Result<Vec<Vec<f64>>> {
    if points < 2 {
        return Err(Error::Invalid("points_per_dim must be at least 2".into()));
    }
    archive
        .implied_by_coordinate()
        .into_iter()
        .enumerate()
        .map(|(g, (est, mut se))| {
            if est.is_empty() {
                return Err(Error::Identification(format!("coordinate {} unidentified", g + 1)));
            }
            let lo = est.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = est.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s = median(&mut se);
            Ok(linspace(lo - padding * s, hi + padding * s, points))
        })
        .collect()
}

/// Tensor-product grid over the padded range of implied estimates.
pub fn build_grid(archive: &StudyArchive, points_per_dim: usize, padding: f64) -> Result<Vec<DVector<f64>>> {
    if archive.dimension > 3 {
        return Err(Error::Invalid("tensor grids are limited to dimension 3; use build_support".into()));
    }
    let grids = coordinate_grids(archive, points_per_dim, padding)?;
    let mut atoms: Vec<Vec<f64>> = vec![Vec::new()];
    for grid in &grids {
        atoms = atoms
            .into_iter()
            .flat_map(|prefix| {
                grid.iter().map(move |&x| {
                    let mut p = prefix.clone();
                    p.push(x);
                    p
                })
            })
            .collect();
    }
    Ok(atoms.into_iter().map(DVector::from_vec).collect())
}

/// Support used for NPMLE: the tensor grid up to dimension 2, and
/// observation-implied exemplars from dimension 3 on.
pub fn build_support(archive: &StudyArchive, points_per_dim: usize, padding: f64) -> Result<Vec<DVector<f64>>> {
    if archive.dimension <= 2 {
        return build_grid(archive, points_per_dim, padding);
    }
    let grids = coordinate_grids(archive, points_per_dim, padding)?;
    let g = archive.dimension;
    let centers: Vec<f64> = archive
        .implied_by_coordinate()
        .into_iter()
        .map(|(mut est, _)| median(&mut est))
        .collect();
    let mut atoms: Vec<Vec<f64>> = Vec::new();
    for s in &archive.studies {
        if let Some((theta, _)) = s.implied_full() {
            atoms.push(theta.iter().copied().collect());
            continue;
        }
        let mut base = centers.clone();
        let mut missing = Vec::new();
        for (j, b) in base.iter_mut().enumerate() {
            match s.selection_row(j) {
                Some((row, w)) => *b = s.estimate[row] / w,
                None => missing.push(j),
            }
        }
        if missing.is_empty() {
            atoms.push(base);
            continue;
        }
        for &j in &missing {
            for &x in &grids[j] {
                let mut a = base.clone();
                a[j] = x;
                atoms.push(a);
            }
        }
    }
    atoms.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    atoms.dedup();
    debug_assert!(atoms.iter().all(|a| a.len() == g));
    Ok(atoms.into_iter().map(DVector::from_vec).collect())
}

/// Log-density floor below which a study is considered missed by the grid.
const UNDERFLOW_LOG: f64 = -708.0;

/// Grid NPMLE by EM on the mixture weights.
pub fn fit_npmle(archive: &StudyArchive, grid: &[DVector<f64>], options: &OptimizerOptions) -> Result<(DiscretePrior, FitReport)> {
    if grid.is_empty() {
        return Err(Error::Invalid("NPMLE grid is empty".into()));
    }
    if grid.iter().any(|a| a.len() != archive.dimension) {
        return Err(Error::Invalid("grid atoms do not match the archive dimension".into()));
    }
    let n = archive.len();
    let k = grid.len();
    // Row-scaled likelihood matrix: a[i*k + j] = exp(logf_ij - max_j logf_ij).
    let rows: Vec<Result<(Vec<f64>, f64)>> = archive
        .studies
        .par_iter()
        .map(|s| {
            let chol = CholFactor::new(&s.covariance)?;
            let logs: Vec<f64> = grid.iter().map(|a| chol.log_density(&(&s.estimate - &s.reporting_operator * a))).collect();
            let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(m > UNDERFLOW_LOG) {
                return Err(Error::Numerical(format!(
                    "study {}: every grid atom has negligible likelihood; the grid misses the data, increase the padding",
                    s.study_id
                )));
            }
            Ok((logs.into_iter().map(|l| (l - m).exp()).collect(), m))
        })
        .collect();
    let mut a = Vec::with_capacity(n * k);
    let mut offset = 0.0;
    for r in rows {
        let (row, m) = r?;
        a.extend(row);
        offset += m;
    }

    let mut w = vec![1.0 / k as f64; k];
    let mut f = vec![0.0; n];
    let eval = |w: &[f64], f: &mut [f64]| -> f64 {
        let mut ll = offset;
        for i in 0..n {
            let row = &a[i * k..(i + 1) * k];
            f[i] = row.iter().zip(w).map(|(x, y)| x * y).sum();
            ll += f[i].ln();
        }
        ll
    };
    let mut ll = eval(&w, &mut f);
    if !ll.is_finite() {
        return Err(Error::Numerical("mixture likelihood underflowed at the uniform start".into()));
    }
    let mut trajectory = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut acc = vec![0.0; k];
    while iterations < options.max_iterations {
        iterations += 1;
        acc.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let c = 1.0 / (n as f64 * f[i]);
            let row = &a[i * k..(i + 1) * k];
            for (s, x) in acc.iter_mut().zip(row) {
                *s += x * c;
            }
        }
        for (wj, s) in w.iter_mut().zip(&acc) {
            *wj *= s;
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let new_ll = eval(&w, &mut f);
        trajectory.push(new_ll);
        let gain = new_ll - ll;
        ll = new_ll;
        if gain < options.tolerance * n as f64 {
            converged = true;
            break;
        }
    }
    let prior = DiscretePrior { atoms: grid.to_vec(), weights: w }.pruned(options.prune_threshold);
    let final_ll = super::marginal_loglik(&super::Prior::Discrete(prior.clone()), archive)?;
    Ok((prior, FitReport { loglik: final_ll, iterations, converged, trajectory }))
}

/// Independent one-dimensional NPMLE per coordinate, each fitted on the
/// studies that report that coordinate directly.
pub fn fit_npmle_independent(
    archive: &StudyArchive,
    points: usize,
    padding: f64,
    options: &OptimizerOptions,
) -> Result<Vec<(DiscretePrior, FitReport)>> {
    (0..archive.dimension)
        .map(|g| {
            let sub = archive.coordinate(g)?;
            let grid = build_grid(&sub, points, padding)?;
            fit_npmle(&sub, &grid, options)
        })
        .collect()
}
