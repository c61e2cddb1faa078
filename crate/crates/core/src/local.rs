//! Per-block estimation: Newton M-estimation with box projection, the
//! sandwich covariance of Algorithm 1, the second-order empirical bias
//! estimate, local debiasing with the box-membership guard, half-splitting
//! for the cross-fitted weighted estimator, and the pooled full-sample
//! benchmark solved by Schur complement on the common block.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{BlockModel, DataBlock, ParameterBox, ParameterVector};
use crate::rng::CounterRng;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("block {block}: needs at least {needed} rows, has {got}")]
    TooFewRows {
        block: usize,
        needed: usize,
        got: usize,
    },
    #[error("block {block}: averaged Hessian singular even after ridge")]
    SingularHessian { block: usize },
    #[error("block {block}: objective not finite at the initial point")]
    BadInitialPoint { block: usize },
    #[error("block {block}: row arity {got} does not match model arity {expected}")]
    RowArityMismatch {
        block: usize,
        expected: usize,
        got: usize,
    },
    #[error("pooled fit: blocks disagree on parameter dimensions")]
    InconsistentBlocks,
}

/// Newton solver controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Convergence threshold on the L2 norm of the mean score.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Backtracking shrink factor.
    pub backtrack_shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
    pub initial_point: InitialPoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum InitialPoint {
    /// Ask the model (logistic: zero; EIV: moment-based start).
    ModelDefault,
    Zeros,
    Given(Vec<f64>),
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            gradient_tolerance: 1e-10,
            max_iterations: 100,
            backtrack_shrink: 0.5,
            sufficient_decrease: 1e-4,
            initial_point: InitialPoint::ModelDefault,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Ridge regularization was needed somewhere along the fit.
    pub ridge_used: bool,
    /// The estimate sits on the box boundary.
    pub clamped: bool,
}

/// Per-block output assembled by [`LocalFit::compute`]: the point estimate
/// plus whatever covariance/bias pieces have been attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalFit {
    pub theta_hat: ParameterVector,
    pub n: usize,
    /// Unscaled p x p sandwich; the covariance of theta_hat is this over n.
    pub h_hat_full: Option<DMatrix<f64>>,
    /// Leading p1 x p1 block of the sandwich.
    pub h_hat: Option<DMatrix<f64>>,
    /// Second-order bias estimate B_hat(theta_hat).
    pub bias_hat: Option<DVector<f64>>,
    /// Whether theta_hat - B_hat/n stayed inside the box.
    pub bias_applied: Option<bool>,
    pub diagnostics: FitDiagnostics,
}

impl LocalFit {
    /// Runs the whole per-block pipeline: fit, sandwich, bias, debias guard.
    pub fn compute(
        block: &DataBlock,
        model: &dyn BlockModel,
        pbox: &ParameterBox,
        opts: &SolverOptions,
    ) -> Result<LocalFit, FitError> {
        let mut fit = fit_local(block, model, pbox, opts)?;
        let sandwich = sandwich_covariance(block, model, &fit.theta_hat)?;
        let bias = bias_estimate(block, model, &fit.theta_hat)?;
        let (_, applied) = debias_local(&fit.theta_hat, &bias.bias, fit.n, pbox);
        fit.diagnostics.ridge_used |= sandwich.ridge_used || bias.ridge_used;
        fit.h_hat = Some(sandwich.common);
        fit.h_hat_full = Some(sandwich.full);
        fit.bias_hat = Some(bias.bias);
        fit.bias_applied = Some(applied);
        Ok(fit)
    }

    /// The bias-corrected estimate, identical to theta_hat when the
    /// corrected point would leave the box.
    pub fn debiased(&self, pbox: &ParameterBox) -> ParameterVector {
        match &self.bias_hat {
            Some(b) => debias_local(&self.theta_hat, b, self.n, pbox).0,
            None => self.theta_hat.clone(),
        }
    }
}

/// Two disjoint halves of a block under a deterministic permutation.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub first: DataBlock,
    pub second: DataBlock,
}

// Scratch buffers so per-row evaluation does not allocate.
struct EvalBuffers {
    score: Vec<f64>,
    hess: Vec<f64>,
    score_acc: Vec<f64>,
    hess_acc: Vec<f64>,
}

impl EvalBuffers {
    fn new(p: usize) -> Self {
        EvalBuffers {
            score: vec![0.0; p],
            hess: vec![0.0; p * p],
            score_acc: vec![0.0; p],
            hess_acc: vec![0.0; p * p],
        }
    }
}

fn mean_objective(block: &DataBlock, model: &dyn BlockModel, theta: &[f64]) -> f64 {
    let mut acc = 0.0;
    for row in block.rows() {
        acc += model.objective(row, theta);
        if !acc.is_finite() {
            return f64::INFINITY;
        }
    }
    acc / block.n() as f64
}

fn mean_score_into(
    block: &DataBlock,
    model: &dyn BlockModel,
    theta: &[f64],
    buf: &mut EvalBuffers,
    out: &mut DVector<f64>,
) {
    out.fill(0.0);
    for row in block.rows() {
        model.score_into(row, theta, &mut buf.score);
        for (o, s) in out.iter_mut().zip(&buf.score) {
            *o += s;
        }
    }
    *out /= block.n() as f64;
}

// One pass for both mean score and mean Hessian.
fn mean_score_hessian_into(
    block: &DataBlock,
    model: &dyn BlockModel,
    theta: &[f64],
    buf: &mut EvalBuffers,
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
) {
    let p = theta.len();
    buf.score_acc.fill(0.0);
    buf.hess_acc.fill(0.0);
    for row in block.rows() {
        model.score_hessian_into(row, theta, &mut buf.score, &mut buf.hess);
        for (acc, s) in buf.score_acc.iter_mut().zip(&buf.score) {
            *acc += s;
        }
        for (acc, h) in buf.hess_acc.iter_mut().zip(&buf.hess) {
            *acc += h;
        }
    }
    let n = block.n() as f64;
    for (g, acc) in grad.iter_mut().zip(&buf.score_acc) {
        *g = acc / n;
    }
    for c in 0..p {
        for r in 0..p {
            hess[(r, c)] = buf.hess_acc[c * p + r] / n;
        }
    }
}

/// Newton M-estimation on one block: projected steps, Armijo backtracking,
/// ridge retry on singular Hessians. A non-converged fit is returned with
/// its diagnostics, never silently.
pub fn fit_local(
    block: &DataBlock,
    model: &dyn BlockModel,
    pbox: &ParameterBox,
    opts: &SolverOptions,
) -> Result<LocalFit, FitError> {
    let p = model.p();
    check_block(block, model)?;
    if block.n() < p {
        return Err(FitError::TooFewRows {
            block: block.id(),
            needed: p,
            got: block.n(),
        });
    }

    let mut theta: Vec<f64> = match &opts.initial_point {
        InitialPoint::ModelDefault => model.initial_point(block).as_slice().to_vec(),
        InitialPoint::Zeros => vec![0.0; p],
        InitialPoint::Given(v) => {
            assert_eq!(v.len(), p, "initial point length mismatch");
            v.clone()
        }
    };
    pbox.project(&mut theta);

    let mut buf = EvalBuffers::new(p);
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);

    let mut f_cur = mean_objective(block, model, &theta);
    if !f_cur.is_finite() {
        return Err(FitError::BadInitialPoint { block: block.id() });
    }

    let mut ridge_used = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;

    for it in 0..opts.max_iterations {
        iterations = it;
        mean_score_hessian_into(block, model, &theta, &mut buf, &mut grad, &mut hess);
        grad_norm = grad.norm();
        if grad_norm <= opts.gradient_tolerance {
            converged = true;
            break;
        }

        let (mut step, ridged) = linalg::solve_with_ridge(&hess, &(-&grad))
            .ok_or(FitError::SingularHessian { block: block.id() })?;
        ridge_used |= ridged;

        // Guard against ascent directions from indefinite Hessians
        // (possible for the non-convex EIV objective).
        if grad.dot(&step) >= 0.0 {
            step = -&grad;
        }

        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-14 {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(t, s)| t + alpha * s)
                .collect();
            pbox.project(&mut cand);
            let displacement: f64 = cand
                .iter()
                .zip(&theta)
                .map(|(c, t)| (c - t) * (c - t))
                .sum::<f64>()
                .sqrt();
            if displacement <= 1e-15 * (1.0 + theta.iter().map(|t| t * t).sum::<f64>().sqrt()) {
                alpha *= opts.backtrack_shrink;
                continue;
            }
            let f_cand = mean_objective(block, model, &cand);
            let dir_deriv: f64 = grad
                .iter()
                .zip(cand.iter().zip(&theta))
                .map(|(g, (c, t))| g * (c - t))
                .sum();
            // Rounding slack: near the optimum the true decrease drops
            // below double precision and must not stall the iteration.
            let slack = 1e-14 * (1.0 + f_cur.abs());
            if f_cand.is_finite() && f_cand <= f_cur + opts.sufficient_decrease * dir_deriv + slack
            {
                theta = cand;
                f_cur = f_cand;
                moved = true;
                break;
            }
            alpha *= opts.backtrack_shrink;
        }
        if !moved {
            // Stalled: either the projection blocks every direction or no
            // step length decreases the objective.
            break;
        }
    }

    if !converged {
        // One final gradient check; the loop may have exited on max_iterations
        // right after a good step.
        mean_score_into(block, model, &theta, &mut buf, &mut grad);
        grad_norm = grad.norm();
        converged = grad_norm <= opts.gradient_tolerance;
    }

    let clamped = theta
        .iter()
        .zip(pbox.lower().iter().zip(pbox.upper()))
        .any(|(t, (l, u))| t <= l || t >= u);

    Ok(LocalFit {
        theta_hat: ParameterVector::from_flat(theta, model.p1()).expect("p1 >= 1"),
        n: block.n(),
        h_hat_full: None,
        h_hat: None,
        bias_hat: None,
        bias_applied: None,
        diagnostics: FitDiagnostics {
            iterations,
            gradient_norm: grad_norm,
            converged,
            ridge_used,
            clamped,
        },
    })
}

/// Un-scaled sandwich estimator and its leading p1 x p1 block.
#[derive(Debug, Clone)]
pub struct Sandwich {
    pub full: DMatrix<f64>,
    pub common: DMatrix<f64>,
    pub ridge_used: bool,
}

/// (grad Psi)^-1 (n^-1 sum psi psi^T) (grad Psi)^-T evaluated at theta_hat.
/// The asymptotic covariance of theta_hat is the returned matrix over n_k.
pub fn sandwich_covariance(
    block: &DataBlock,
    model: &dyn BlockModel,
    theta_hat: &ParameterVector,
) -> Result<Sandwich, FitError> {
    check_block(block, model)?;
    let p = model.p();
    let theta = theta_hat.flat();
    let n = block.n() as f64;

    let mut buf = EvalBuffers::new(p);
    let mut outer_acc = vec![0.0; p * p];
    for row in block.rows() {
        model.score_hessian_into(row, theta, &mut buf.score, &mut buf.hess);
        for (acc, h) in buf.hess_acc.iter_mut().zip(&buf.hess) {
            *acc += h;
        }
        for c in 0..p {
            let sc = buf.score[c];
            for r in 0..p {
                outer_acc[c * p + r] += buf.score[r] * sc;
            }
        }
    }
    let mut a = DMatrix::zeros(p, p);
    let mut s = DMatrix::zeros(p, p);
    for c in 0..p {
        for r in 0..p {
            a[(r, c)] = buf.hess_acc[c * p + r] / n;
            s[(r, c)] = outer_acc[c * p + r] / n;
        }
    }

    let inv = linalg::invert_with_ridge(&a).ok_or(FitError::SingularHessian {
        block: block.id(),
    })?;
    let full = linalg::symmetrize(&(&inv.inverse * s * inv.inverse.transpose()));
    let p1 = model.p1();
    let common = full.view((0, 0), (p1, p1)).into_owned();
    Ok(Sandwich {
        full,
        common,
        ridge_used: inv.ridge_used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasVariant {
    /// Empirical formula exactly as written: v_i = grad psi_i.
    Uncentered,
    /// Population-style centering v_i = grad psi_i - grad Psi_hat; differs
    /// from `Uncentered` only through n^-1 sum d_i, which vanishes at an
    /// exact root of the estimating equations.
    Centered,
}

#[derive(Debug, Clone)]
pub struct BiasEstimate {
    pub bias: DVector<f64>,
    pub ridge_used: bool,
}

/// Empirical second-order bias
/// B_hat = Q_hat (n^-1 sum v_i d_i + 1/2 H3_hat n^-1 sum d_i (x) d_i)
/// with Q_hat = (-n^-1 sum grad psi_i)^-1 and d_i = Q_hat psi_i.
pub fn bias_estimate(
    block: &DataBlock,
    model: &dyn BlockModel,
    theta_hat: &ParameterVector,
) -> Result<BiasEstimate, FitError> {
    bias_estimate_with(block, model, theta_hat, BiasVariant::Uncentered)
}

pub fn bias_estimate_with(
    block: &DataBlock,
    model: &dyn BlockModel,
    theta_hat: &ParameterVector,
    variant: BiasVariant,
) -> Result<BiasEstimate, FitError> {
    check_block(block, model)?;
    let p = model.p();
    let theta = theta_hat.flat();
    let n = block.n() as f64;

    let mut buf = EvalBuffers::new(p);
    let mut a = DMatrix::zeros(p, p);
    for row in block.rows() {
        model.hessian_into(row, theta, &mut buf.hess);
        for c in 0..p {
            for r in 0..p {
                a[(r, c)] += buf.hess[c * p + r];
            }
        }
    }
    a /= n;
    let inv = linalg::invert_with_ridge(&a).ok_or(FitError::SingularHessian {
        block: block.id(),
    })?;
    let q_hat = -&inv.inverse;

    let mut third = vec![0.0; p * p * p];
    let mut h3_sum = DVector::zeros(p * p * p);
    let mut vd_sum = DVector::zeros(p);
    let mut dd_sum = DVector::zeros(p * p);
    let mut d_sum = DVector::zeros(p);
    let mut d_i = DVector::zeros(p);
    for row in block.rows() {
        model.score_into(row, theta, &mut buf.score);
        model.hessian_into(row, theta, &mut buf.hess);
        model.third_derivative_into(row, theta, &mut third);
        // d_i = Q_hat psi_i
        for r in 0..p {
            let mut acc = 0.0;
            for c in 0..p {
                acc += q_hat[(r, c)] * buf.score[c];
            }
            d_i[r] = acc;
        }
        d_sum += &d_i;
        // v_i d_i with v_i = grad psi_i (the Hessian of M at the row)
        for r in 0..p {
            let mut acc = 0.0;
            for c in 0..p {
                acc += buf.hess[c * p + r] * d_i[c];
            }
            vd_sum[r] += acc;
        }
        for j in 0..p {
            for m in 0..p {
                dd_sum[j * p + m] += d_i[j] * d_i[m];
            }
        }
        for (acc, t) in h3_sum.iter_mut().zip(&third) {
            *acc += t;
        }
    }
    vd_sum /= n;
    dd_sum /= n;
    d_sum /= n;
    h3_sum /= n;

    if variant == BiasVariant::Centered {
        // Subtract (grad Psi_hat) (n^-1 sum d_i).
        vd_sum -= &a * &d_sum;
    }

    let h3 = DMatrix::from_column_slice(p, p * p, h3_sum.as_slice());
    let inner = vd_sum + 0.5 * (&h3 * &dd_sum);
    Ok(BiasEstimate {
        bias: &q_hat * inner,
        ridge_used: inv.ridge_used,
    })
}

/// theta_hat - B_hat / n when that point stays inside the box; otherwise
/// theta_hat unchanged. The boolean is the bias-applied indicator.
pub fn debias_local(
    theta_hat: &ParameterVector,
    bias_hat: &DVector<f64>,
    n: usize,
    pbox: &ParameterBox,
) -> (ParameterVector, bool) {
    assert_eq!(theta_hat.p(), bias_hat.len(), "bias length mismatch");
    let candidate: Vec<f64> = theta_hat
        .flat()
        .iter()
        .zip(bias_hat.iter())
        .map(|(t, b)| t - b / n as f64)
        .collect();
    if pbox.contains(&candidate) {
        (
            ParameterVector::from_flat(candidate, theta_hat.p1()).expect("p1 preserved"),
            true,
        )
    } else {
        (theta_hat.clone(), false)
    }
}

/// Splits a block into halves of sizes ceil(n/2) and floor(n/2) under a
/// deterministic seed-keyed permutation. `p` is the parameter dimension the
/// halves must be able to fit.
pub fn split_halves(block: &DataBlock, seed: u64, p: usize) -> Result<SplitPair, FitError> {
    let n = block.n();
    if n < 2 * p.max(1) {
        return Err(FitError::TooFewRows {
            block: block.id(),
            needed: 2 * p.max(1),
            got: n,
        });
    }
    let mut rng = CounterRng::from_parts(&[seed, block.id() as u64, 0x53504C49]);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let first_len = n.div_ceil(2);
    Ok(SplitPair {
        first: block.subset(&idx[..first_len], block.id()),
        second: block.subset(&idx[first_len..], block.id()),
    })
}

/// Full-sample benchmark: solves the simultaneous estimating equations over
/// (phi, lambda_1, ..., lambda_K) by Newton with the arrowhead Hessian
/// reduced by Schur complement on the phi block.
#[derive(Debug, Clone)]
pub struct PooledFit {
    pub phi: DVector<f64>,
    pub lambdas: Vec<DVector<f64>>,
    pub diagnostics: FitDiagnostics,
}

pub fn fit_pooled(
    blocks: &[DataBlock],
    model: &dyn BlockModel,
    pbox: &ParameterBox,
    opts: &SolverOptions,
) -> Result<PooledFit, FitError> {
    if blocks.is_empty() {
        return Err(FitError::InconsistentBlocks);
    }
    let p1 = model.p1();
    let p2 = model.p2();
    let p = p1 + p2;
    let k = blocks.len();
    let n_total: usize = blocks.iter().map(|b| b.n()).sum();
    for b in blocks {
        check_block(b, model)?;
        if b.n() < p {
            return Err(FitError::TooFewRows {
                block: b.id(),
                needed: p,
                got: b.n(),
            });
        }
    }

    // Start: average the model starts' common parts, keep block parts.
    let mut phi = DVector::zeros(p1);
    let mut lambdas: Vec<DVector<f64>> = Vec::with_capacity(k);
    for b in blocks {
        let start = match &opts.initial_point {
            InitialPoint::ModelDefault => model.initial_point(b),
            InitialPoint::Zeros => DVector::zeros(p),
            InitialPoint::Given(v) => DVector::from_column_slice(v),
        };
        phi += start.rows(0, p1);
        lambdas.push(start.rows(p1, p2).into_owned());
    }
    phi /= k as f64;
    project_pooled(pbox, &mut phi, &mut lambdas);

    let mut buf = EvalBuffers::new(p);
    let mut theta_k = vec![0.0; p];

    let objective = |phi: &DVector<f64>, lambdas: &[DVector<f64>], theta_k: &mut Vec<f64>| -> f64 {
        let mut total = 0.0;
        for (b, lam) in blocks.iter().zip(lambdas) {
            assemble_theta(phi, lam, theta_k);
            let m = mean_objective(b, model, theta_k);
            if !m.is_finite() {
                return f64::INFINITY;
            }
            total += m * b.n() as f64;
        }
        total / n_total as f64
    };

    let mut f_cur = objective(&phi, &lambdas, &mut theta_k);
    if !f_cur.is_finite() {
        return Err(FitError::BadInitialPoint {
            block: blocks[0].id(),
        });
    }

    let mut ridge_used = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;

    let mut g_phi = DVector::zeros(p1);
    let mut g_lam: Vec<DVector<f64>> = vec![DVector::zeros(p2); k];
    let mut a_phi = DMatrix::zeros(p1, p1);
    let mut b_blocks: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p1, p2); k];
    let mut d_blocks: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p2, p2); k];

    for it in 0..opts.max_iterations {
        iterations = it;
        g_phi.fill(0.0);
        a_phi.fill(0.0);
        let mut grad_norm2 = 0.0;
        for (ki, (b, lam)) in blocks.iter().zip(&lambdas).enumerate() {
            assemble_theta(&phi, lam, &mut theta_k);
            let nk = b.n() as f64;
            let mut g = DVector::zeros(p);
            let mut h = DMatrix::zeros(p, p);
            mean_score_hessian_into(b, model, &theta_k, &mut buf, &mut g, &mut h);
            g_phi += nk * g.rows(0, p1);
            g_lam[ki] = nk * g.rows(p1, p2);
            a_phi += nk * h.view((0, 0), (p1, p1));
            b_blocks[ki] = nk * h.view((0, p1), (p1, p2));
            d_blocks[ki] = nk * h.view((p1, p1), (p2, p2));
            grad_norm2 += g.rows(p1, p2).norm_squared();
        }
        grad_norm2 += (&g_phi / n_total as f64).norm_squared();
        grad_norm = grad_norm2.sqrt();
        if grad_norm <= opts.gradient_tolerance {
            converged = true;
            break;
        }

        // Schur complement on the phi block.
        let mut schur = a_phi.clone();
        let mut rhs = -&g_phi;
        let mut d_invs: Vec<DMatrix<f64>> = Vec::with_capacity(k);
        for ki in 0..k {
            if p2 == 0 {
                d_invs.push(DMatrix::zeros(0, 0));
                continue;
            }
            let inv = linalg::invert_with_ridge(&d_blocks[ki]).ok_or(FitError::SingularHessian {
                block: blocks[ki].id(),
            })?;
            ridge_used |= inv.ridge_used;
            schur -= &b_blocks[ki] * &inv.inverse * b_blocks[ki].transpose();
            rhs += &b_blocks[ki] * &inv.inverse * &g_lam[ki];
            d_invs.push(inv.inverse);
        }
        let (d_phi, ridged) = linalg::solve_with_ridge(&schur, &rhs).ok_or(
            FitError::SingularHessian {
                block: blocks[0].id(),
            },
        )?;
        ridge_used |= ridged;
        let d_lams: Vec<DVector<f64>> = (0..k)
            .map(|ki| {
                if p2 == 0 {
                    DVector::zeros(0)
                } else {
                    -(&d_invs[ki] * (&g_lam[ki] + b_blocks[ki].transpose() * &d_phi))
                }
            })
            .collect();

        // Descent guard against indefinite joint Hessians.
        let mut dir_deriv = g_phi.dot(&d_phi);
        for ki in 0..k {
            dir_deriv += g_lam[ki].dot(&d_lams[ki]);
        }
        let (step_phi, step_lams) = if dir_deriv >= 0.0 {
            (
                -&g_phi / n_total as f64,
                g_lam
                    .iter()
                    .zip(blocks)
                    .map(|(g, b)| -(g / b.n() as f64))
                    .collect::<Vec<_>>(),
            )
        } else {
            (d_phi, d_lams)
        };

        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-14 {
            let mut cand_phi = &phi + alpha * &step_phi;
            let mut cand_lams: Vec<DVector<f64>> = lambdas
                .iter()
                .zip(&step_lams)
                .map(|(l, s)| l + alpha * s)
                .collect();
            project_pooled(pbox, &mut cand_phi, &mut cand_lams);
            let f_cand = objective(&cand_phi, &cand_lams, &mut theta_k);
            // Armijo decrease measured against the normalized objective.
            let mut dd = (&cand_phi - &phi).dot(&g_phi);
            for ki in 0..k {
                dd += (&cand_lams[ki] - &lambdas[ki]).dot(&g_lam[ki]);
            }
            dd /= n_total as f64;
            let displacement =
                (&cand_phi - &phi).norm_squared() + {
                    let mut s = 0.0;
                    for ki in 0..k {
                        s += (&cand_lams[ki] - &lambdas[ki]).norm_squared();
                    }
                    s
                };
            if displacement.sqrt() <= 1e-15 {
                alpha *= opts.backtrack_shrink;
                continue;
            }
            let slack = 1e-14 * (1.0 + f_cur.abs());
            if f_cand.is_finite() && f_cand <= f_cur + opts.sufficient_decrease * dd + slack {
                phi = cand_phi;
                lambdas = cand_lams;
                f_cur = f_cand;
                moved = true;
                break;
            }
            alpha *= opts.backtrack_shrink;
        }
        if !moved {
            break;
        }
    }

    if !converged {
        let mut grad_norm2 = 0.0;
        g_phi.fill(0.0);
        for (ki, (b, lam)) in blocks.iter().zip(&lambdas).enumerate() {
            assemble_theta(&phi, lam, &mut theta_k);
            let mut g = DVector::zeros(p);
            mean_score_into(b, model, &theta_k, &mut buf, &mut g);
            g_phi += b.n() as f64 * g.rows(0, p1);
            let _ = ki;
            grad_norm2 += g.rows(p1, p2).norm_squared();
        }
        grad_norm2 += (&g_phi / n_total as f64).norm_squared();
        grad_norm = grad_norm2.sqrt();
        converged = grad_norm <= opts.gradient_tolerance;
    }

    let clamped = {
        let mut any = false;
        for (j, v) in phi.iter().enumerate() {
            any |= *v <= pbox.lower()[j] || *v >= pbox.upper()[j];
        }
        for lam in &lambdas {
            for (j, v) in lam.iter().enumerate() {
                any |= *v <= pbox.lower()[p1 + j] || *v >= pbox.upper()[p1 + j];
            }
        }
        any
    };

    Ok(PooledFit {
        phi,
        lambdas,
        diagnostics: FitDiagnostics {
            iterations,
            gradient_norm: grad_norm,
            converged,
            ridge_used,
            clamped,
        },
    })
}

fn assemble_theta(phi: &DVector<f64>, lam: &DVector<f64>, out: &mut [f64]) {
    out[..phi.len()].copy_from_slice(phi.as_slice());
    out[phi.len()..].copy_from_slice(lam.as_slice());
}

fn project_pooled(pbox: &ParameterBox, phi: &mut DVector<f64>, lambdas: &mut [DVector<f64>]) {
    let p1 = phi.len();
    for j in 0..p1 {
        phi[j] = phi[j].clamp(pbox.lower()[j], pbox.upper()[j]);
    }
    for lam in lambdas.iter_mut() {
        for j in 0..lam.len() {
            lam[j] = lam[j].clamp(pbox.lower()[p1 + j], pbox.upper()[p1 + j]);
        }
    }
}

fn check_block(block: &DataBlock, model: &dyn BlockModel) -> Result<(), FitError> {
    if block.row_len() != model.row_len() {
        return Err(FitError::RowArityMismatch {
            block: block.id(),
            expected: model.row_len(),
            got: block.row_len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ErrorsInVariables, ExponentialMle, Logistic, Quadratic};

    fn default_box(p: usize, p1: usize) -> ParameterBox {
        ParameterBox::symmetric(p, p1, 50.0)
    }

    fn quadratic_block(id: usize) -> DataBlock {
        let mut rng = CounterRng::from_parts(&[21, id as u64]);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.next_normal(1.0, 1.0), rng.next_normal(-0.5, 2.0)])
            .collect();
        DataBlock::from_rows(id, &rows).unwrap()
    }

    #[test]
    fn quadratic_fit_is_sample_mean() {
        let block = quadratic_block(0);
        let model = Quadratic::new(1, 1);
        let fit = fit_local(&block, &model, &default_box(2, 1), &SolverOptions::default()).unwrap();
        let n = block.n() as f64;
        let mean0 = block.rows().map(|r| r[0]).sum::<f64>() / n;
        let mean1 = block.rows().map(|r| r[1]).sum::<f64>() / n;
        assert!(fit.diagnostics.converged);
        assert!((fit.theta_hat.flat()[0] - mean0).abs() < 1e-12);
        assert!((fit.theta_hat.flat()[1] - mean1).abs() < 1e-12);
    }

    #[test]
    fn exponential_fit_is_inverse_mean() {
        let mut rng = CounterRng::from_parts(&[22]);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![-rng.next_f64().max(1e-12).ln() / 1.7])
            .collect();
        let block = DataBlock::from_rows(0, &rows).unwrap();
        let fit = fit_local(
            &block,
            &ExponentialMle,
            &ParameterBox::new(vec![1e-6], vec![100.0], 1).unwrap(),
            &SolverOptions::default(),
        )
        .unwrap();
        let mean = block.rows().map(|r| r[0]).sum::<f64>() / block.n() as f64;
        assert!(fit.diagnostics.converged);
        assert!((fit.theta_hat.flat()[0] - 1.0 / mean).abs() < 1e-9);
    }

    /// Coarse-to-fine grid search of the empirical logistic loss.
    fn grid_search_logistic(block: &DataBlock, model: &Logistic) -> Vec<f64> {
        let mut center = vec![0.0, 0.0];
        let mut radius = 8.0;
        for _ in 0..24 {
            let mut best = (f64::INFINITY, center.clone());
            let steps = 8i32;
            for i in -steps..=steps {
                for j in -steps..=steps {
                    let cand = vec![
                        center[0] + radius * i as f64 / steps as f64,
                        center[1] + radius * j as f64 / steps as f64,
                    ];
                    let f = mean_objective(block, model, &cand);
                    if f < best.0 {
                        best = (f, cand);
                    }
                }
            }
            center = best.1;
            radius /= 4.0;
        }
        center
    }

    #[test]
    fn logistic_fit_matches_grid_search() {
        let model = Logistic::new(1, 1);
        let mut rng = CounterRng::from_parts(&[23]);
        let theta_true = [0.8, -1.4];
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let x = [rng.next_normal(0.0, 1.0), rng.next_normal(0.0, 1.0)];
                let z = x[0] * theta_true[0] + x[1] * theta_true[1];
                let p = 1.0 / (1.0 + (-z).exp());
                let y = if rng.next_bernoulli(p) { 1.0 } else { 0.0 };
                vec![x[0], x[1], y]
            })
            .collect();
        let block = DataBlock::from_rows(0, &rows).unwrap();
        let fit = fit_local(&block, &model, &default_box(2, 1), &SolverOptions::default()).unwrap();
        let grid = grid_search_logistic(&block, &model);
        assert!(fit.diagnostics.converged);
        assert!(
            (fit.theta_hat.flat()[0] - grid[0]).abs() < 1e-4,
            "newton {} vs grid {}",
            fit.theta_hat.flat()[0],
            grid[0]
        );
        assert!((fit.theta_hat.flat()[1] - grid[1]).abs() < 1e-4);
    }

    #[test]
    fn sandwich_for_quadratic_is_sample_covariance() {
        let block = quadratic_block(1);
        let model = Quadratic::new(1, 1);
        let fit = fit_local(&block, &model, &default_box(2, 1), &SolverOptions::default()).unwrap();
        let sw = sandwich_covariance(&block, &model, &fit.theta_hat).unwrap();
        let n = block.n() as f64;
        let m0 = block.rows().map(|r| r[0]).sum::<f64>() / n;
        let m1 = block.rows().map(|r| r[1]).sum::<f64>() / n;
        let mut cov = [[0.0f64; 2]; 2];
        for r in block.rows() {
            let d = [r[0] - m0, r[1] - m1];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j] / n;
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((sw.full[(i, j)] - cov[i][j]).abs() < 1e-10);
            }
        }
        assert_eq!(sw.common.nrows(), 1);
        assert!((sw.common[(0, 0)] - cov[0][0]).abs() < 1e-10);
    }

    #[test]
    fn quadratic_bias_is_exactly_zero() {
        let block = quadratic_block(2);
        let model = Quadratic::new(1, 1);
        let fit = fit_local(&block, &model, &default_box(2, 1), &SolverOptions::default()).unwrap();
        let b = bias_estimate(&block, &model, &fit.theta_hat).unwrap();
        assert!(b.bias.norm() < 1e-10, "bias = {}", b.bias.norm());
    }

    #[test]
    fn centered_and_uncentered_bias_agree_at_the_root() {
        let mut rng = CounterRng::from_parts(&[31]);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![-rng.next_f64().max(1e-12).ln() / 2.0])
            .collect();
        let block = DataBlock::from_rows(0, &rows).unwrap();
        let fit = fit_local(
            &block,
            &ExponentialMle,
            &ParameterBox::new(vec![1e-6], vec![100.0], 1).unwrap(),
            &SolverOptions::default(),
        )
        .unwrap();
        let u = bias_estimate_with(&block, &ExponentialMle, &fit.theta_hat, BiasVariant::Uncentered)
            .unwrap();
        let c = bias_estimate_with(&block, &ExponentialMle, &fit.theta_hat, BiasVariant::Centered)
            .unwrap();
        assert!((u.bias[0] - c.bias[0]).abs() < 1e-6);
        // And the estimate is near the closed-form B = lambda.
        let lam = fit.theta_hat.flat()[0];
        assert!((u.bias[0] - lam).abs() / lam < 0.2);
    }

    #[test]
    fn debias_guard_examples() {
        let pbox = ParameterBox::new(vec![-1.0], vec![1.0], 1).unwrap();
        let theta = ParameterVector::from_flat(vec![0.9], 1).unwrap();
        let (out, applied) = debias_local(&theta, &DVector::from_element(1, 10.0), 100, &pbox);
        assert!(applied);
        assert!((out.flat()[0] - 0.8).abs() < 1e-15);

        let theta = ParameterVector::from_flat(vec![0.99], 1).unwrap();
        let (out, applied) = debias_local(&theta, &DVector::from_element(1, -10.0), 100, &pbox);
        assert!(!applied);
        assert_eq!(out.flat()[0], 0.99);

        let (out, applied) = debias_local(&theta, &DVector::zeros(1), 100, &pbox);
        assert!(applied);
        assert_eq!(out.flat()[0], 0.99);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let block = DataBlock::from_rows(0, &rows).unwrap();
        let s1 = split_halves(&block, 7, 1).unwrap();
        let s2 = split_halves(&block, 7, 1).unwrap();
        assert_eq!(s1.first.n(), 3);
        assert_eq!(s1.second.n(), 2);
        assert_eq!(s1.first, s2.first);
        assert_eq!(s1.second, s2.second);
        // Disjoint union of the original rows.
        let mut all: Vec<f64> = s1
            .first
            .rows()
            .chain(s1.second.rows())
            .map(|r| r[0])
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, vec![0.0, 1.0, 2.0, 3.0, 4.0]);

        let even = DataBlock::from_rows(0, &(0..4).map(|i| vec![i as f64]).collect::<Vec<_>>())
            .unwrap();
        let se = split_halves(&even, 9, 1).unwrap();
        assert_eq!(se.first.n(), 2);
        assert_eq!(se.second.n(), 2);

        assert!(split_halves(&even, 9, 3).is_err());
    }

    #[test]
    fn pooled_with_one_block_equals_local() {
        let block = quadratic_block(3);
        let model = Quadratic::new(1, 1);
        let pbox = default_box(2, 1);
        let opts = SolverOptions::default();
        let local = fit_local(&block, &model, &pbox, &opts).unwrap();
        let pooled = fit_pooled(std::slice::from_ref(&block), &model, &pbox, &opts).unwrap();
        assert!((pooled.phi[0] - local.theta_hat.flat()[0]).abs() < 1e-10);
        assert!((pooled.lambdas[0][0] - local.theta_hat.flat()[1]).abs() < 1e-10);
    }

    #[test]
    fn pooled_quadratic_is_grand_mean() {
        // Shared-mean structure: phi is the mean of the first coordinate
        // pooled over every row of every block.
        let blocks: Vec<DataBlock> = (0..3).map(quadratic_block).collect();
        let model = Quadratic::new(1, 1);
        let pooled = fit_pooled(
            &blocks,
            &model,
            &default_box(2, 1),
            &SolverOptions::default(),
        )
        .unwrap();
        let total: usize = blocks.iter().map(|b| b.n()).sum();
        let grand = blocks
            .iter()
            .flat_map(|b| b.rows().map(|r| r[0]).collect::<Vec<_>>())
            .sum::<f64>()
            / total as f64;
        assert!(pooled.diagnostics.converged);
        assert!((pooled.phi[0] - grand).abs() < 1e-10);
        for (b, lam) in blocks.iter().zip(&pooled.lambdas) {
            let mean1 = b.rows().map(|r| r[1]).sum::<f64>() / b.n() as f64;
            assert!((lam[0] - mean1).abs() < 1e-10);
        }
    }

    #[test]
    fn non_converged_fit_reports_diagnostics() {
        let block = quadratic_block(4);
        let model = Quadratic::new(1, 1);
        let mut opts = SolverOptions::default();
        opts.max_iterations = 1;
        opts.gradient_tolerance = 1e-300;
        opts.initial_point = InitialPoint::Given(vec![30.0, 30.0]);
        let fit = fit_local(&block, &model, &default_box(2, 1), &opts);
        // Either converges in one exact Newton step to gradient ~ 0 (then the
        // impossible tolerance still fails) or reports non-convergence.
        let fit = fit.unwrap();
        assert!(!fit.diagnostics.converged);
        assert!(fit.diagnostics.gradient_norm.is_finite());
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let block = DataBlock::from_rows(0, &[vec![1.0, 2.0]]).unwrap();
        let model = Quadratic::new(1, 1);
        let err = fit_local(
            &block,
            &model,
            &default_box(2, 1),
            &SolverOptions::default(),
        );
        assert!(matches!(err, Err(FitError::TooFewRows { .. })));
    }
}
