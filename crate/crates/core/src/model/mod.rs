//! M-function abstraction and the built-in block models.
//!
//! A [`BlockModel`] evaluates the per-observation objective M(x; theta) and
//! its exact derivatives up to third order. Derivative buffers are plain
//! column-major slices so the per-row inner loops of the solvers stay
//! allocation-free; thin wrappers return `nalgebra` types for callers that
//! prefer them.
//!
//! Third derivatives use the recursive Kronecker layout: a p x p^2 matrix
//! whose column block j is the elementwise derivative of the Hessian with
//! respect to theta_j, i.e. entry (l, j*p + m) holds
//! d^3 M / d theta_l d theta_j d theta_m. Contracting with u (x) u gives the
//! second directional derivative of the score along u.

mod builtin;
mod data;
mod params;

pub use builtin::{ErrorsInVariables, ExponentialMle, Logistic, Quadratic};
pub use data::DataBlock;
pub use params::{ParameterBox, ParameterVector};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid dimensions: {detail}")]
    InvalidDimensions { detail: String },
    #[error("non-finite value in block {block}, row {row}")]
    NonFiniteData { block: usize, row: usize },
    #[error("non-finite {what} evaluation")]
    NonFiniteEvaluation { what: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: cannot parse numeric field")]
    CsvParse { path: String, line: usize },
    #[error("{path}:{line}: expected {expected} columns, got {got}")]
    CsvShape {
        path: String,
        line: usize,
        expected: usize,
        got: usize,
    },
}

/// An M-function with exact derivative evaluations.
///
/// Implementations must keep the derivative chain consistent:
/// `score` is the gradient of `objective`, `hessian` the gradient of
/// `score`, and `third_derivative` the gradient of `hessian`. All
/// evaluations are pure functions of `(row, theta)`.
pub trait BlockModel: Sync + Send {
    fn name(&self) -> &'static str;

    /// Dimension of the common parameter phi.
    fn p1(&self) -> usize;

    /// Dimension of the block-specific parameter lambda_k.
    fn p2(&self) -> usize;

    fn p(&self) -> usize {
        self.p1() + self.p2()
    }

    /// Arity d of a data row.
    fn row_len(&self) -> usize;

    fn objective(&self, row: &[f64], theta: &[f64]) -> f64;

    /// Writes the p-vector gradient into `out`.
    fn score_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]);

    /// Writes the p x p Hessian into `out` (column-major; symmetric).
    fn hessian_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]);

    /// Writes score and Hessian together; models whose derivatives share
    /// work (the logistic sigmoid, the EIV residual) override this to a
    /// single pass.
    fn score_hessian_into(
        &self,
        row: &[f64],
        theta: &[f64],
        score_out: &mut [f64],
        hessian_out: &mut [f64],
    ) {
        self.score_into(row, theta, score_out);
        self.hessian_into(row, theta, hessian_out);
    }

    /// Writes the p x p^2 third-derivative matrix into `out` (column-major,
    /// Kronecker layout). The default is a central finite difference of the
    /// Hessian for models without analytic third derivatives.
    fn third_derivative_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        fd_third_derivative(self, row, theta, out);
    }

    /// Solver starting point for a block; zero unless the model knows better.
    fn initial_point(&self, _block: &DataBlock) -> DVector<f64> {
        DVector::zeros(self.p())
    }
}

/// Central finite difference of the Hessian, step 1e-5 * (1 + |theta_j|).
pub fn fd_third_derivative<M: BlockModel + ?Sized>(
    model: &M,
    row: &[f64],
    theta: &[f64],
    out: &mut [f64],
) {
    let p = model.p();
    debug_assert_eq!(out.len(), p * p * p);
    let mut th = theta.to_vec();
    let mut h_plus = vec![0.0; p * p];
    let mut h_minus = vec![0.0; p * p];
    for j in 0..p {
        let h = 1e-5 * (1.0 + theta[j].abs());
        th[j] = theta[j] + h;
        model.hessian_into(row, &th, &mut h_plus);
        th[j] = theta[j] - h;
        model.hessian_into(row, &th, &mut h_minus);
        th[j] = theta[j];
        // Column block j occupies columns j*p .. (j+1)*p.
        for m in 0..p {
            for l in 0..p {
                out[(j * p + m) * p + l] = (h_plus[m * p + l] - h_minus[m * p + l]) / (2.0 * h);
            }
        }
    }
}

/// Checked wrapper returning the score as a vector.
pub fn score<M: BlockModel + ?Sized>(model: &M, row: &[f64], theta: &[f64]) -> DVector<f64> {
    check_dims(model, row, theta);
    let mut out = DVector::zeros(model.p());
    model.score_into(row, theta, out.as_mut_slice());
    out
}

/// Checked wrapper returning the Hessian as a matrix.
pub fn hessian<M: BlockModel + ?Sized>(model: &M, row: &[f64], theta: &[f64]) -> DMatrix<f64> {
    check_dims(model, row, theta);
    let p = model.p();
    let mut buf = vec![0.0; p * p];
    model.hessian_into(row, theta, &mut buf);
    DMatrix::from_column_slice(p, p, &buf)
}

/// Checked wrapper returning the p x p^2 third-derivative matrix.
pub fn third_derivative<M: BlockModel + ?Sized>(
    model: &M,
    row: &[f64],
    theta: &[f64],
) -> DMatrix<f64> {
    check_dims(model, row, theta);
    let p = model.p();
    let mut buf = vec![0.0; p * p * p];
    model.third_derivative_into(row, theta, &mut buf);
    DMatrix::from_column_slice(p, p * p, &buf)
}

/// Checked objective evaluation; errors on a non-finite result.
pub fn objective<M: BlockModel + ?Sized>(
    model: &M,
    row: &[f64],
    theta: &[f64],
) -> Result<f64, ModelError> {
    check_dims(model, row, theta);
    let v = model.objective(row, theta);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NonFiniteEvaluation { what: "objective" })
    }
}

fn check_dims<M: BlockModel + ?Sized>(model: &M, row: &[f64], theta: &[f64]) {
    assert_eq!(
        row.len(),
        model.row_len(),
        "{}: row arity mismatch",
        model.name()
    );
    assert_eq!(
        theta.len(),
        model.p(),
        "{}: parameter length mismatch",
        model.name()
    );
}

pub mod checks {
    //! Finite-difference consistency checks for the derivative chain of a
    //! model: score against objective, Hessian against score, third
    //! derivative against Hessian, and the Kronecker contraction contract.
    //! Useful when wiring up a new model.

    use super::*;

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    /// score ~ central difference of objective.
    pub fn check_score<M: BlockModel + ?Sized>(
        model: &M,
        row: &[f64],
        theta: &[f64],
        tol: f64,
    ) -> Result<(), String> {
        let s = score(model, row, theta);
        let mut th = theta.to_vec();
        for j in 0..model.p() {
            let h = 1e-5 * (1.0 + theta[j].abs());
            th[j] = theta[j] + h;
            let up = model.objective(row, &th);
            th[j] = theta[j] - h;
            let dn = model.objective(row, &th);
            th[j] = theta[j];
            let fd = (up - dn) / (2.0 * h);
            if rel_err(s[j], fd) > tol {
                return Err(format!(
                    "{}: score[{j}] = {} vs fd {}",
                    model.name(),
                    s[j],
                    fd
                ));
            }
        }
        Ok(())
    }

    /// hessian ~ central difference of score, plus symmetry.
    pub fn check_hessian<M: BlockModel + ?Sized>(
        model: &M,
        row: &[f64],
        theta: &[f64],
        tol: f64,
    ) -> Result<(), String> {
        let h_mat = hessian(model, row, theta);
        let p = model.p();
        for l in 0..p {
            for m in 0..p {
                if (h_mat[(l, m)] - h_mat[(m, l)]).abs() > 1e-12 {
                    return Err(format!("{}: Hessian asymmetry at ({l},{m})", model.name()));
                }
            }
        }
        let mut th = theta.to_vec();
        for j in 0..p {
            let h = 1e-5 * (1.0 + theta[j].abs());
            th[j] = theta[j] + h;
            let up = score(model, row, &th);
            th[j] = theta[j] - h;
            let dn = score(model, row, &th);
            th[j] = theta[j];
            for l in 0..p {
                let fd = (up[l] - dn[l]) / (2.0 * h);
                if rel_err(h_mat[(l, j)], fd) > tol {
                    return Err(format!(
                        "{}: hessian[({l},{j})] = {} vs fd {}",
                        model.name(),
                        h_mat[(l, j)],
                        fd
                    ));
                }
            }
        }
        Ok(())
    }

    /// third derivative against central differences of Hessian entries.
    pub fn check_third<M: BlockModel + ?Sized>(
        model: &M,
        row: &[f64],
        theta: &[f64],
        tol: f64,
    ) -> Result<(), String> {
        let t = third_derivative(model, row, theta);
        let p = model.p();
        let mut th = theta.to_vec();
        for j in 0..p {
            let h = 1e-5 * (1.0 + theta[j].abs());
            th[j] = theta[j] + h;
            let up = hessian(model, row, &th);
            th[j] = theta[j] - h;
            let dn = hessian(model, row, &th);
            th[j] = theta[j];
            for m in 0..p {
                for l in 0..p {
                    let fd = (up[(l, m)] - dn[(l, m)]) / (2.0 * h);
                    if rel_err(t[(l, j * p + m)], fd) > tol {
                        return Err(format!(
                            "{}: third[({l},{j},{m})] = {} vs fd {}",
                            model.name(),
                            t[(l, j * p + m)],
                            fd
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Kronecker-layout contract: T (u (x) u) = d^2/dt^2 score(theta + t u).
    pub fn check_kronecker_contraction<M: BlockModel + ?Sized>(
        model: &M,
        row: &[f64],
        theta: &[f64],
        u: &[f64],
        tol: f64,
    ) -> Result<(), String> {
        let p = model.p();
        let t_mat = third_derivative(model, row, theta);
        let mut uu = DVector::zeros(p * p);
        for j in 0..p {
            for m in 0..p {
                uu[j * p + m] = u[j] * u[m];
            }
        }
        let contracted = &t_mat * &uu;

        let h = 1e-4;
        let shift = |t: f64| -> DVector<f64> {
            let th: Vec<f64> = theta.iter().zip(u).map(|(a, b)| a + t * b).collect();
            score(model, row, &th)
        };
        let fd = (shift(h) + shift(-h) - 2.0 * shift(0.0)) / (h * h);
        for l in 0..p {
            if rel_err(contracted[l], fd[l]) > tol {
                return Err(format!(
                    "{}: contraction[{l}] = {} vs fd {}",
                    model.name(),
                    contracted[l],
                    fd[l]
                ));
            }
        }
        Ok(())
    }
}
