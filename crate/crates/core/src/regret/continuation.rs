use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CholFactor};

/// Continuation value `Psi(m)` of a decision problem that is quasi-linear in
/// the state, as a function of the posterior mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContinuationKind {
    /// `m' Lambda m`.
    Quadratic { lambda: DMatrix<f64> },
    /// `m' Sigma^{-1} m / (2 gamma)`.
    Portfolio { gamma: f64, sigma: DMatrix<f64> },
    /// `sum_g pi_g max(0, m_g)`.
    BinaryAdoption { pi: Vec<f64> },
    /// `max_j m_j`.
    Selection,
    /// `max(-a0 (1 - m), -a1 m)` on the posterior probability `m` of the
    /// alternative `theta_1 > 0`.
    Testing { a0: f64, a1: f64 },
}

impl ContinuationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ContinuationKind::Quadratic { .. } => "quadratic",
            ContinuationKind::Portfolio { .. } => "portfolio",
            ContinuationKind::BinaryAdoption { .. } => "binary_adoption",
            ContinuationKind::Selection => "selection",
            ContinuationKind::Testing { .. } => "testing",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            ContinuationKind::Quadratic { lambda } => {
                if lambda.nrows() != dim || lambda.ncols() != dim {
                    return Err(Error::Invalid(format!("Lambda must be {dim}x{dim}")));
                }
                if !linalg::is_symmetric(lambda, 1e-12) || linalg::sym_eigenvalues(lambda)[0] < -1e-12 {
                    return Err(Error::Invalid("Lambda must be symmetric PSD".into()));
                }
            }
            ContinuationKind::Portfolio { gamma, sigma } => {
                if !(*gamma > 0.0) {
                    return Err(Error::Invalid("risk aversion must be positive".into()));
                }
                if sigma.nrows() != dim || sigma.ncols() != dim || CholFactor::new(sigma).is_err() {
                    return Err(Error::Invalid(format!("return covariance must be a {dim}x{dim} PD matrix")));
                }
            }
            ContinuationKind::BinaryAdoption { pi } => {
                if pi.len() != dim || pi.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::Invalid(format!("adoption weights must be {dim} nonnegative numbers")));
                }
            }
            ContinuationKind::Selection => {
                if dim == 0 {
                    return Err(Error::Invalid("selection needs at least one alternative".into()));
                }
            }
            ContinuationKind::Testing { a0, a1 } => {
                if !(*a0 >= 0.0 && *a1 >= 0.0) {
                    return Err(Error::Invalid("testing losses must be nonnegative".into()));
                }
            }
        }
        Ok(())
    }

    /// Lipschitz certificate `(L, p)` with
    /// `|Psi(m) - Psi(m')| <= L (1 + |m|^p + |m'|^p) |m - m'|`.
    pub fn lipschitz(&self) -> (f64, i32) {
        match self {
            ContinuationKind::Quadratic { lambda } => (linalg::frobenius(lambda), 1),
            ContinuationKind::Portfolio { gamma, sigma } => {
                let inv = CholFactor::new(sigma).map(|c| c.inverse()).unwrap_or_else(|_| DMatrix::from_element(1, 1, f64::INFINITY));
                (linalg::frobenius(&inv) / (2.0 * gamma), 1)
            }
            ContinuationKind::BinaryAdoption { pi } => (pi.iter().map(|p| p * p).sum::<f64>().sqrt(), 0),
            ContinuationKind::Selection => (1.0, 0),
            ContinuationKind::Testing { a0, a1 } => (a0.max(*a1), 0),
        }
    }
}

/// `Psi(m)` for the given kind.
pub fn continuation_value(kind: &ContinuationKind, m: &DVector<f64>) -> Result<f64> {
    match kind {
        ContinuationKind::Quadratic { lambda } => {
            check_len(lambda.nrows(), m)?;
            Ok(m.dot(&(lambda * m)))
        }
        ContinuationKind::Portfolio { gamma, sigma } => {
            check_len(sigma.nrows(), m)?;
            let chol = CholFactor::new(sigma)?;
            Ok(chol.quad_form(m) / (2.0 * gamma))
        }
        ContinuationKind::BinaryAdoption { pi } => {
            check_len(pi.len(), m)?;
            Ok(pi.iter().zip(m.iter()).map(|(p, x)| p * x.max(0.0)).sum())
        }
        ContinuationKind::Selection => {
            if m.is_empty() {
                return Err(Error::Invalid("selection needs at least one alternative".into()));
            }
            Ok(m.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
        ContinuationKind::Testing { a0, a1 } => {
            check_len(1, m)?;
            let p = m[0];
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("testing needs a probability in [0, 1], got {p}")));
            }
            Ok((-a0 * (1.0 - p)).max(-a1 * p))
        }
    }
}

fn check_len(expected: usize, m: &DVector<f64>) -> Result<()> {
    if m.len() != expected {
        return Err(Error::Invalid(format!("posterior mean has length {} but the kind expects {expected}", m.len())));
    }
    Ok(())
}
