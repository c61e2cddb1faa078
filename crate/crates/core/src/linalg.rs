//! Small dense linear-algebra helpers shared by the solvers and
//! aggregators. Matrices here are p x p with p rarely above a dozen.

use nalgebra::{DMatrix, DVector};

/// Forces exact symmetry: (A + A^T) / 2.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Max absolute asymmetry, ||A - A^T||_inf.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose())
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// True when the symmetric matrix is positive definite within `tol`:
/// Cholesky succeeds after adding `tol * I` scaled slack, and no eigenvalue
/// sits below `-tol`.
pub fn is_positive_definite(a: &DMatrix<f64>, tol: f64) -> bool {
    if a.nrows() != a.ncols() || asymmetry(a) > tol.max(1e-9) {
        return false;
    }
    match min_symmetric_eigenvalue(a) {
        Some(min_eig) => min_eig >= -tol,
        None => false,
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> Option<f64> {
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().cloned().reduce(f64::min)
}

/// Inverts via LU; `None` when numerically singular.
pub fn try_invert(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = a.clone().try_inverse()?;
    if inv.iter().all(|v| v.is_finite()) {
        Some(inv)
    } else {
        None
    }
}

/// Outcome of an inversion that may have needed a ridge.
pub struct RidgedInverse {
    pub inverse: DMatrix<f64>,
    pub ridge_used: bool,
}

/// Inverts `a`, retrying once with the ridge `eps * I`,
/// `eps = 1e-8 * trace(a) / p`, when the plain inversion fails. The retry is
/// always reported so callers can flag the fit.
pub fn invert_with_ridge(a: &DMatrix<f64>) -> Option<RidgedInverse> {
    if let Some(inverse) = try_invert(a) {
        return Some(RidgedInverse {
            inverse,
            ridge_used: false,
        });
    }
    let p = a.nrows();
    let trace: f64 = a.diagonal().iter().sum();
    let eps = 1e-8 * trace.abs().max(1e-12) / p as f64;
    let ridged = a + DMatrix::identity(p, p) * eps;
    try_invert(&ridged).map(|inverse| RidgedInverse {
        inverse,
        ridge_used: true,
    })
}

/// Solves A x = b via LU with the same ridge retry as [`invert_with_ridge`].
pub fn solve_with_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, bool)> {
    if let Some(lu) = a.clone().lu().solve(b) {
        if lu.iter().all(|v| v.is_finite()) {
            return Some((lu, false));
        }
    }
    let p = a.nrows();
    let trace: f64 = a.diagonal().iter().sum();
    let eps = 1e-8 * trace.abs().max(1e-12) / p as f64;
    let ridged = a + DMatrix::identity(p, p) * eps;
    ridged
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .map(|x| (x, true))
}

/// Weighted quadratic form x^T A x.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * a * x)[(0, 0)]
}
