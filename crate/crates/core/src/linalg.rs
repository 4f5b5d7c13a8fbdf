//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::normal::LN_2PI;

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(1.0);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(a: &DMatrix<f64>) -> (f64, f64) {
    let ev = sym_eigenvalues(a);
    (ev[0], ev[ev.len() - 1])
}

/// Positive definiteness under the relative rule `lambda_min > rel * lambda_max`.
pub fn is_pd_relative(a: &DMatrix<f64>, rel: f64) -> bool {
    let (lo, hi) = eig_extremes(a);
    hi > 0.0 && lo > rel * hi
}

/// Clip negative eigenvalues to zero.
pub fn psd_project(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let d = eig.eigenvalues.map(|x| x.max(0.0));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()))
}

/// Symmetric square root factor `A` with `A A' = S` for PSD `S`.
pub fn psd_sqrt_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = s.clone().cholesky() {
        return c.l();
    }
    let eig = symmetrize(s).symmetric_eigen();
    let d = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// `b - a` is PSD up to `tol`.
pub fn loewner_leq(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    sym_eigenvalues(&(b - a))[0] >= -tol
}

/// Cholesky factor of a symmetric PD matrix.
pub struct CholFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    logdet: f64,
}

impl CholFactor {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let chol = symmetrize(a)
            .cholesky()
            .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Self { chol, logdet })
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `r' A^{-1} r`.
    pub fn quad_form(&self, r: &DVector<f64>) -> f64 {
        r.dot(&self.chol.solve(r))
    }

    /// Log density of `N(0, A)` at `r`.
    pub fn log_density(&self, r: &DVector<f64>) -> f64 {
        -0.5 * (r.len() as f64 * LN_2PI + self.logdet + self.quad_form(r))
    }
}

/// Numerical rank via singular values relative to the largest one.
pub fn rank(a: &DMatrix<f64>, rel: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel * max).count()
}

/// Frobenius norm.
pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_projection_clips() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = psd_project(&a);
        let ev = sym_eigenvalues(&p);
        assert!(ev[0].abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_factor_of_singular_matrix() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let a = psd_sqrt_factor(&s);
        assert!((&a * a.transpose() - &s).amax() < 1e-12);
    }

    #[test]
    fn chol_log_density_matches_scalar() {
        let a = DMatrix::from_row_slice(1, 1, &[4.0]);
        let c = CholFactor::new(&a).unwrap();
        let r = DVector::from_vec(vec![1.0]);
        let expect = -0.5 * (LN_2PI + 4f64.ln() + 0.25);
        assert!((c.log_density(&r) - expect).abs() < 1e-14);
    }

    #[test]
    fn rank_detects_deficiency() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(rank(&a, 1e-10), 1);
    }
}
