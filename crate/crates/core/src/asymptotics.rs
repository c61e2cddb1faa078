//! Closed-form asymptotic-variance oracles: the SaC/full variance pair,
//! the WD/GMM variance, the errors-in-variables variance formulas and their
//! relative efficiencies, the sandwich matrix inequality, and a Monte Carlo
//! probe of the second-order Bartlett identity.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::BlockModel;
use crate::rng::CounterRng;

#[derive(Debug, Error)]
pub enum AsymptoticsError {
    #[error("no blocks supplied")]
    Empty,
    #[error("block weights must be positive fractions summing to one")]
    BadWeights,
    #[error("singular matrix in {what}")]
    Singular { what: &'static str },
}

/// Asymptotic ingredients of one block: the partial information
/// J_{phi|lambda}, the variance Sigma of the efficient score for phi, and
/// the block weight (a fraction gamma_k, or a raw sample size n_k where an
/// operation says so). H = J^-1 Sigma J^-T is derived on demand.
#[derive(Debug, Clone)]
pub struct BlockAsymptotics {
    pub j: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub gamma: f64,
}

impl BlockAsymptotics {
    pub fn new(j: DMatrix<f64>, sigma: DMatrix<f64>, gamma: f64) -> Self {
        BlockAsymptotics { j, sigma, gamma }
    }

    /// H = J^-1 Sigma J^-T, the per-block asymptotic covariance of phi_hat_k
    /// on the sqrt(n_k) scale.
    pub fn h(&self) -> Option<DMatrix<f64>> {
        let j_inv = linalg::try_invert(&self.j)?;
        Some(linalg::symmetrize(&(&j_inv * &self.sigma * j_inv.transpose())))
    }
}

/// Asymptotic variances of sqrt(N)(phi_hat - phi*) for the SaC and full
/// sample estimators. Weights must be fractions summing to one.
pub fn theorem1_variances(
    blocks: &[BlockAsymptotics],
) -> Result<(DMatrix<f64>, DMatrix<f64>), AsymptoticsError> {
    if blocks.is_empty() {
        return Err(AsymptoticsError::Empty);
    }
    let total: f64 = blocks.iter().map(|b| b.gamma).sum();
    if blocks.iter().any(|b| b.gamma <= 0.0) || (total - 1.0).abs() > 1e-8 {
        return Err(AsymptoticsError::BadWeights);
    }
    let p1 = blocks[0].j.nrows();
    let mut v_sac = DMatrix::zeros(p1, p1);
    let mut j_bar = DMatrix::zeros(p1, p1);
    let mut sigma_bar = DMatrix::zeros(p1, p1);
    for b in blocks {
        let h = b.h().ok_or(AsymptoticsError::Singular { what: "J_k" })?;
        v_sac += b.gamma * h;
        j_bar += b.gamma * &b.j;
        sigma_bar += b.gamma * &b.sigma;
    }
    let j_bar_inv = linalg::try_invert(&j_bar).ok_or(AsymptoticsError::Singular {
        what: "sum gamma_k J_k",
    })?;
    let v_full = linalg::symmetrize(&(&j_bar_inv * sigma_bar * j_bar_inv.transpose()));
    Ok((v_sac, v_full))
}

/// (sum n_k J_k^T Sigma_k^-1 J_k)^-1: the asymptotic variance shared by the
/// weighted distributed and the GMM estimators. `gamma` carries n_k here;
/// passing fractions returns the variance on the sqrt(N) scale instead.
pub fn wd_gmm_asy_var(blocks: &[BlockAsymptotics]) -> Result<DMatrix<f64>, AsymptoticsError> {
    if blocks.is_empty() {
        return Err(AsymptoticsError::Empty);
    }
    let p1 = blocks[0].j.nrows();
    let mut acc = DMatrix::zeros(p1, p1);
    for b in blocks {
        let sigma_inv = linalg::try_invert(&b.sigma).ok_or(AsymptoticsError::Singular {
            what: "Sigma_k",
        })?;
        acc += b.gamma * (b.j.transpose() * sigma_inv * &b.j);
    }
    linalg::try_invert(&acc)
        .map(|m| linalg::symmetrize(&m))
        .ok_or(AsymptoticsError::Singular {
            what: "sum n_k J^T Sigma^-1 J",
        })
}

/// Errors-in-variables design of the first simulation experiment: two
/// equal-size blocks sharing phi*, Z ~ N(mu_z, sigma_z^2), measurement
/// noise variance sigma2 on both coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EivScenario {
    pub phi_star: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu_z: f64,
    pub sigma_z2: f64,
    pub sigma2: f64,
    pub n_total: usize,
}

impl EivScenario {
    /// The four scenario families of the first experiment, indexed 1..=4.
    pub fn table_defaults(scenario: u8, lambda1: f64, lambda2: f64, n_total: usize) -> Option<Self> {
        let (mu_z, sigma_z2) = match scenario {
            1 => (1.0, 0.1),
            2 => (3.0, 0.5),
            3 => (0.0, 0.5),
            4 => (4.0, 0.5),
            _ => return None,
        };
        Some(EivScenario {
            phi_star: 1.0,
            lambda1,
            lambda2,
            mu_z,
            sigma_z2,
            sigma2: 1.0,
            n_total,
        })
    }
}

/// N-scaled asymptotic variances of the three phi estimators under the
/// errors-in-variables model, plus the ARE of the full estimator to SaC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EivVariances {
    pub nvar_full: f64,
    pub nvar_sac: f64,
    pub nvar_wd: f64,
    /// nvar_sac / nvar_full: values below one mean the full-sample
    /// estimator is the less efficient of the pair.
    pub are: f64,
}

/// Scalar (J, Sigma) for one errors-in-variables block, derived from the
/// model expectations: J = a var(Z) / (sigma^2 E Z^2) and
/// Sigma = J + a^2 mu_z^2 / (E Z^2)^2 with a = 1 / (1 + lambda^2).
pub fn eiv_j_sigma(scn: &EivScenario, lambda: f64) -> (f64, f64) {
    let a = 1.0 / (1.0 + lambda * lambda);
    let ez2 = scn.mu_z * scn.mu_z + scn.sigma_z2;
    let j = a * scn.sigma_z2 / (scn.sigma2 * ez2);
    let sigma = j + a * a * scn.mu_z * scn.mu_z / (ez2 * ez2);
    (j, sigma)
}

/// Evaluates the displayed full/SaC variance formulas (harmonic versus
/// arithmetic means of 1 + lambda_k^2) and the WD variance from the derived
/// (J, Sigma) pair.
pub fn eiv_asymptotic_variances(scn: &EivScenario) -> EivVariances {
    let ez2 = scn.mu_z * scn.mu_z + scn.sigma_z2;
    let var_z = scn.sigma_z2;
    let c1 = scn.sigma2 * ez2 / var_z;
    let c2 = scn.sigma2 * scn.sigma2 * scn.mu_z * scn.mu_z / (var_z * var_z);
    let a1 = 1.0 / (1.0 + scn.lambda1 * scn.lambda1);
    let a2 = 1.0 / (1.0 + scn.lambda2 * scn.lambda2);

    let nvar_full = c1 * 2.0 / (a1 + a2) + c2 * (2.0 * (a1 * a1 + a2 * a2)) / ((a1 + a2) * (a1 + a2));
    let nvar_sac = c1 * (1.0 / a1 + 1.0 / a2) / 2.0 + c2;

    let (j1, s1) = eiv_j_sigma(scn, scn.lambda1);
    let (j2, s2) = eiv_j_sigma(scn, scn.lambda2);
    let nvar_wd = 1.0 / (0.5 * (j1 * j1 / s1) + 0.5 * (j2 * j2 / s2));

    EivVariances {
        nvar_full,
        nvar_sac,
        nvar_wd,
        are: nvar_sac / nvar_full,
    }
}

/// Q = X^T H^-1 X + Y^T K^-1 Y - (X+Y)^T (H+K)^-1 (X+Y), which is positive
/// semidefinite whenever H and K are positive definite.
pub fn sandwich_inequality_residual(
    h: &DMatrix<f64>,
    k: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DMatrix<f64>, AsymptoticsError> {
    let h_inv = linalg::try_invert(h).ok_or(AsymptoticsError::Singular { what: "H" })?;
    let k_inv = linalg::try_invert(k).ok_or(AsymptoticsError::Singular { what: "K" })?;
    let hk_inv = linalg::try_invert(&(h + k)).ok_or(AsymptoticsError::Singular { what: "H+K" })?;
    let xy = x + y;
    let q = x.transpose() * h_inv * x + y.transpose() * k_inv * y
        - xy.transpose() * hk_inv * &xy;
    Ok(linalg::symmetrize(&q))
}

/// Monte Carlo probe of E[grad M grad M^T] = gamma E[grad^2 M].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BartlettProbe {
    /// Trace ratio tr(E[grad M grad M^T]) / tr(E[grad^2 M]).
    pub gamma_hat: f64,
    /// ||E[grad M grad M^T] - gamma_hat E[grad^2 M]||_F / ||E[grad^2 M]||_F.
    pub residual: f64,
}

/// Estimates both expectations with `n_mc` sampled rows and reports the
/// best-fitting Bartlett factor and the relative residual.
pub fn bartlett_residual<F>(
    model: &dyn BlockModel,
    theta: &[f64],
    mut sampler: F,
    n_mc: usize,
    seed: u64,
) -> BartlettProbe
where
    F: FnMut(&mut CounterRng, &mut [f64]),
{
    assert!(n_mc > 0);
    let p = model.p();
    let mut rng = CounterRng::from_parts(&[seed, 0xBA57]);
    let mut row = vec![0.0; model.row_len()];
    let mut score = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    let mut outer = DMatrix::zeros(p, p);
    let mut mean_hess = DMatrix::zeros(p, p);
    for _ in 0..n_mc {
        sampler(&mut rng, &mut row);
        model.score_into(&row, theta, &mut score);
        model.hessian_into(&row, theta, &mut hess);
        for c in 0..p {
            for r in 0..p {
                outer[(r, c)] += score[r] * score[c];
                mean_hess[(r, c)] += hess[c * p + r];
            }
        }
    }
    outer /= n_mc as f64;
    mean_hess /= n_mc as f64;

    let gamma_hat = outer.trace() / mean_hess.trace();
    let residual = (&outer - gamma_hat * &mean_hess).norm() / mean_hess.norm();
    BartlettProbe {
        gamma_hat,
        residual,
    }
}

/// Random positive definite matrix for the inequality sweeps.
pub fn random_spd(p: usize, rng: &mut CounterRng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(p, p, |_, _| rng.next_normal(0.0, 1.0));
    let spd = &m * m.transpose() + DMatrix::identity(p, p) * 0.1;
    linalg::symmetrize(&spd)
}
