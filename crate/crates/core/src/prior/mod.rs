//! Cross-study priors: Gaussian and discrete representations, fitting, and
//! marginal likelihoods.

mod gaussian;
mod npmle;
pub mod optim;

pub use gaussian::{fit_gaussian_prior, gls_mean, method_of_moments_start, profile_gradient_log_cholesky, profile_loglik};
pub use npmle::{build_grid, build_support, fit_npmle, fit_npmle_independent};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CholFactor};
use crate::normal::log_sum_exp;
use crate::study_data::StudyArchive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub structure: Structure,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, structure: Structure) -> Self {
        let mut covariance = linalg::symmetrize(&covariance);
        if structure == Structure::Diagonal {
            covariance = DMatrix::from_diagonal(&covariance.diagonal());
        }
        Self { mean, covariance, structure }
    }

    pub fn diagonal(mean: &[f64], variances: &[f64]) -> Self {
        Self {
            mean: DVector::from_column_slice(mean),
            covariance: DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
            structure: Structure::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().copied().collect()
    }

    /// Off-diagonal entries are exactly zero.
    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.covariance[(i, j)] == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePrior {
    pub atoms: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl DiscretePrior {
    pub fn new(atoms: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::Invalid("discrete prior needs matching nonempty atoms and weights".into()));
        }
        let d = atoms[0].len();
        if atoms.iter().any(|a| a.len() != d) {
            return Err(Error::Invalid("atoms differ in dimension".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(Error::Invalid("weights must be a probability vector".into()));
        }
        Ok(Self { atoms, weights })
    }

    pub fn point_mass(atom: DVector<f64>) -> Self {
        Self { atoms: vec![atom], weights: vec![1.0] }
    }

    /// One-dimensional prior from scalar atoms.
    pub fn scalar(atoms: &[f64], weights: &[f64]) -> Result<Self> {
        Self::new(atoms.iter().map(|&a| DVector::from_vec(vec![a])).collect(), weights.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (a, &w) in self.atoms.iter().zip(&self.weights) {
            m += a * w;
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let d = self.dim();
        let mut c = DMatrix::zeros(d, d);
        for (a, &w) in self.atoms.iter().zip(&self.weights) {
            let r = a - &m;
            c += &r * r.transpose() * w;
        }
        linalg::symmetrize(&c)
    }

    /// Gaussian with the same mean and covariance (diagonal part only if requested).
    pub fn moment_match(&self, structure: Structure) -> GaussianPrior {
        GaussianPrior::new(self.mean(), self.covariance(), structure)
    }

    /// Marginal law of coordinate `g`, atoms merged.
    pub fn marginal(&self, g: usize) -> DiscretePrior {
        let mut pairs: Vec<(f64, f64)> = self.atoms.iter().zip(&self.weights).map(|(a, &w)| (a[g], w)).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut atoms: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (a, w) in pairs {
            if atoms.last() == Some(&a) {
                *weights.last_mut().unwrap() += w;
            } else {
                atoms.push(a);
                weights.push(w);
            }
        }
        DiscretePrior { atoms: atoms.into_iter().map(|a| DVector::from_vec(vec![a])).collect(), weights }
    }

    /// Product law of independent one-dimensional marginals, first
    /// coordinate slowest.
    pub fn product(marginals: &[DiscretePrior]) -> Result<DiscretePrior> {
        if marginals.is_empty() || marginals.iter().any(|m| m.dim() != 1) {
            return Err(Error::Invalid("product needs one-dimensional marginals".into()));
        }
        let mut atoms = vec![Vec::new()];
        let mut weights = vec![1.0];
        for m in marginals {
            let mut next_a = Vec::with_capacity(atoms.len() * m.atoms.len());
            let mut next_w = Vec::with_capacity(next_a.capacity());
            for (a, w) in atoms.iter().zip(&weights) {
                for (b, v) in m.atoms.iter().zip(&m.weights) {
                    let mut c: Vec<f64> = a.clone();
                    c.push(b[0]);
                    next_a.push(c);
                    next_w.push(w * v);
                }
            }
            atoms = next_a;
            weights = next_w;
        }
        let total: f64 = weights.iter().sum();
        Ok(DiscretePrior { atoms: atoms.into_iter().map(DVector::from_vec).collect(), weights: weights.into_iter().map(|w| w / total).collect() })
    }

    /// Drop atoms below `threshold` and renormalize.
    pub fn pruned(&self, threshold: f64) -> DiscretePrior {
        let keep: Vec<usize> = (0..self.atoms.len()).filter(|&k| self.weights[k] >= threshold).collect();
        let total: f64 = keep.iter().map(|&k| self.weights[k]).sum();
        DiscretePrior {
            atoms: keep.iter().map(|&k| self.atoms[k].clone()).collect(),
            weights: keep.iter().map(|&k| self.weights[k] / total).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Gaussian(GaussianPrior),
    Discrete(DiscretePrior),
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Gaussian(p) => p.dim(),
            Prior::Discrete(p) => p.dim(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            Prior::Gaussian(p) => p.mean.clone(),
            Prior::Discrete(p) => p.mean(),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            Prior::Gaussian(p) => p.covariance.clone(),
            Prior::Discrete(p) => p.covariance(),
        }
    }

    /// Gaussian view: identity for Gaussian priors, moment matching otherwise.
    pub fn as_gaussian(&self, structure: Structure) -> GaussianPrior {
        match self {
            Prior::Gaussian(p) => p.clone(),
            Prior::Discrete(p) => p.moment_match(structure),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trajectory: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_iterations: usize,
    /// EM: stop when the per-iteration gain falls below `tolerance * n`.
    /// Gaussian: tolerance on the gradient norm (full) or sweep improvement (diagonal).
    pub tolerance: f64,
    pub prune_threshold: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self { max_iterations: 10_000, tolerance: 1e-9, prune_threshold: 1e-8 }
    }
}

impl OptimizerOptions {
    pub fn gaussian() -> Self {
        Self { max_iterations: 2_000, tolerance: 1e-4, prune_threshold: 0.0 }
    }
}

/// Log marginal likelihood of the archive under a prior.
pub fn marginal_loglik(prior: &Prior, archive: &StudyArchive) -> Result<f64> {
    if prior.dim() != archive.dimension {
        return Err(Error::Invalid(format!(
            "prior dimension {} differs from archive dimension {}",
            prior.dim(),
            archive.dimension
        )));
    }
    let mut total = 0.0;
    for s in &archive.studies {
        let r = &s.reporting_operator;
        total += match prior {
            Prior::Gaussian(p) => {
                let m = &s.covariance + r * &p.covariance * r.transpose();
                CholFactor::new(&m)?.log_density(&(&s.estimate - r * &p.mean))
            }
            Prior::Discrete(p) => {
                let chol = CholFactor::new(&s.covariance)?;
                let terms: Vec<f64> = p
                    .atoms
                    .iter()
                    .zip(&p.weights)
                    .map(|(a, &w)| w.ln() + chol.log_density(&(&s.estimate - r * a)))
                    .collect();
                log_sum_exp(&terms)
            }
        };
    }
    Ok(total)
}

/// JSON document for a fitted prior.
pub fn prior_document(prior: &Prior, fit: Option<&FitReport>) -> serde_json::Value {
    let mut doc = match prior {
        Prior::Gaussian(p) => serde_json::json!({
            "kind": "gaussian",
            "structure": p.structure,
            "mean": p.mean.iter().collect::<Vec<_>>(),
            "cov": (0..p.dim()).map(|i| p.covariance.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        }),
        Prior::Discrete(p) => serde_json::json!({
            "kind": "discrete",
            "atoms": p.atoms.iter().map(|a| a.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "weights": p.weights,
        }),
    };
    if let Some(f) = fit {
        doc["fit"] = serde_json::json!({"loglik": f.loglik, "iterations": f.iterations, "converged": f.converged});
    }
    doc
}

/// Parse a prior document written by [`prior_document`].
pub fn parse_prior_document(doc: &serde_json::Value) -> Result<Prior> {
    let bad = |m: &str| Error::Invalid(format!("prior document: {m}"));
    let vec_of = |v: &serde_json::Value| -> Result<Vec<f64>> {
        v.as_array()
            .ok_or_else(|| bad("expected array"))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| bad("expected number")))
            .collect()
    };
    match doc.get("kind").and_then(|k| k.as_str()) {
        Some("gaussian") => {
            let mean = vec_of(doc.get("mean").ok_or_else(|| bad("missing mean"))?)?;
            let rows = doc.get("cov").and_then(|c| c.as_array()).ok_or_else(|| bad("missing cov"))?;
            let g = mean.len();
            if rows.len() != g {
                return Err(bad("cov dimension mismatch"));
            }
            let mut cov = DMatrix::zeros(g, g);
            for (i, row) in rows.iter().enumerate() {
                let row = vec_of(row)?;
                if row.len() != g {
                    return Err(bad("cov dimension mismatch"));
                }
                for (j, x) in row.into_iter().enumerate() {
                    cov[(i, j)] = x;
                }
            }
            let structure = match doc.get("structure").and_then(|s| s.as_str()) {
                Some("diagonal") => Structure::Diagonal,
                _ => Structure::Full,
            };
            if !linalg::is_symmetric(&cov, 1e-12) || linalg::sym_eigenvalues(&cov).first().is_some_and(|&e| e < -1e-12) {
                return Err(bad("cov must be symmetric PSD"));
            }
            Ok(Prior::Gaussian(GaussianPrior::new(DVector::from_vec(mean), cov, structure)))
        }
        Some("discrete") => {
            let atoms = doc
                .get("atoms")
                .and_then(|a| a.as_array())
                .ok_or_else(|| bad("missing atoms"))?
                .iter()
                .map(|a| vec_of(a).map(DVector::from_vec))
                .collect::<Result<Vec<_>>>()?;
            let weights = vec_of(doc.get("weights").ok_or_else(|| bad("missing weights"))?)?;
            Ok(Prior::Discrete(DiscretePrior::new(atoms, weights)?))
        }
        _ => Err(bad("kind must be \"gaussian\" or \"discrete\"")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study_data::StudySummary;

    #[test]
    fn point_mass_matches_degenerate_gaussian() {
        let a = StudyArchive::new(
            vec![
                StudySummary::full("a", &[0.3, -0.1], &[0.5, 0.4]),
                StudySummary::selection("b", 2, &[1], &[0.7], &[0.2]),
            ],
            2,
        )
        .unwrap();
        let theta = DVector::from_vec(vec![0.1, 0.2]);
        let d = Prior::Discrete(DiscretePrior::point_mass(theta.clone()));
        let g = Prior::Gaussian(GaussianPrior::new(theta, DMatrix::zeros(2, 2), Structure::Full));
        let (ld, lg) = (marginal_loglik(&d, &a).unwrap(), marginal_loglik(&g, &a).unwrap());
        assert!((ld - lg).abs() < 1e-12, "{ld} vs {lg}");
    }

    #[test]
    fn marginal_of_discrete_merges_atoms() {
        let p = DiscretePrior::new(
            vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![0.0, 2.0]), DVector::from_vec(vec![1.0, 2.0])],
            vec![0.25, 0.25, 0.5],
        )
        .unwrap();
        let m = p.marginal(0);
        assert_eq!(m.atoms.len(), 2);
        assert_eq!(m.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn document_round_trip() {
        let g = Prior::Gaussian(GaussianPrior::new(
            DVector::from_vec(vec![0.2, 0.1]),
            DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.03]),
            Structure::Full,
        ));
        assert_eq!(parse_prior_document(&prior_document(&g, None)).unwrap(), g);
        let d = Prior::Discrete(DiscretePrior::scalar(&[0.0, 1.0], &[0.3, 0.7]).unwrap());
        assert_eq!(parse_prior_document(&prior_document(&d, None)).unwrap(), d);
    }
}
