//! Coordinator-side estimator algebra. Everything here consumes
//! [`BlockSummary`] values only; raw data rows never reach this module.
//!
//! Summaries are sorted by block id before folding, so results do not
//! depend on arrival order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{ParameterBox, ParameterVector};

pub use crate::special::chisq_quantile;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("no summaries to aggregate")]
    Empty,
    #[error("summaries disagree on the common dimension")]
    DimensionMismatch,
    #[error("every summary carries a degraded covariance; nothing to weight")]
    AllDegraded,
    #[error("estimator requires bias-corrected summaries, block {k} is raw")]
    NotBiasCorrected { k: usize },
    #[error("block {k}: dWD needs both halves' summaries")]
    MissingTwin { k: usize },
    #[error("block {k}: subsample of {got} rows cannot support {needed} parameters")]
    SubsampleTooSmall { k: usize, needed: usize, got: usize },
    #[error("confidence region unavailable: {reason}")]
    NoRegion { reason: String },
}

/// The distributed estimators and the pooled benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Sac,
    Wd,
    DSac,
    DWd,
    Savgm,
    Full,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Sac => "sac",
            EstimatorKind::Wd => "wd",
            EstimatorKind::DSac => "dsac",
            EstimatorKind::DWd => "dwd",
            EstimatorKind::Savgm => "savgm",
            EstimatorKind::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sac" => Some(EstimatorKind::Sac),
            "wd" => Some(EstimatorKind::Wd),
            "dsac" => Some(EstimatorKind::DSac),
            "dwd" => Some(EstimatorKind::DWd),
            "savgm" => Some(EstimatorKind::Savgm),
            "full" => Some(EstimatorKind::Full),
            _ => None,
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// What one block sends to the coordinator: sample size, common-parameter
/// estimate (raw or bias-corrected), and the inverted sandwich block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSummary {
    pub k: usize,
    pub n: usize,
    pub phi_hat: DVector<f64>,
    pub h_inv: DMatrix<f64>,
    pub bias_corrected: bool,
    /// Set when h_inv failed the positive-definiteness check; such blocks
    /// are left out of any weighted combination.
    pub degraded: bool,
    /// Second-split twin for the cross-fitted dWD estimator.
    pub twin: Option<Box<BlockSummary>>,
}

impl BlockSummary {
    pub fn new(
        k: usize,
        n: usize,
        phi_hat: DVector<f64>,
        h_inv: DMatrix<f64>,
        bias_corrected: bool,
    ) -> Self {
        let degraded = !linalg::is_positive_definite(&h_inv, 1e-10);
        BlockSummary {
            k,
            n,
            phi_hat,
            h_inv,
            bias_corrected,
            degraded,
            twin: None,
        }
    }

    pub fn with_twin(mut self, twin: BlockSummary) -> Self {
        self.twin = Some(Box::new(twin));
        self
    }

    pub fn p1(&self) -> usize {
        self.phi_hat.len()
    }
}

/// An aggregated estimate of the common parameter together with the matrix
/// standardizing its chi-square statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateEstimate {
    pub phi: DVector<f64>,
    pub kind: EstimatorKind,
    /// Quadratic-form matrix G of the statistic (phi_hat - phi)^T G
    /// (phi_hat - phi): sum n_k Hinv_k for WD/dWD, N^2 (sum n_k H_k)^-1 for
    /// SaC/dSaC. Absent for SAVGM, whose asymptotic distribution the
    /// aggregation does not provide.
    pub standardizer: Option<DMatrix<f64>>,
    /// Box fallback of Algorithm 1 step 4 / Algorithm 2 step 6 fired.
    pub fallback_used: bool,
}

/// Chi-square confidence ellipsoid
/// { phi : (center - phi)^T shape (center - phi) <= threshold }.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub threshold: f64,
    pub alpha: f64,
}

impl ConfidenceRegion {
    pub fn contains(&self, phi: &[f64]) -> bool {
        assert_eq!(phi.len(), self.center.len());
        let d = &self.center - DVector::from_column_slice(phi);
        linalg::quad_form(&self.shape, &d) <= self.threshold
    }

    /// Full width of the region's projection onto coordinate `j`; for a
    /// scalar common parameter this is the interval length.
    pub fn width(&self, j: usize) -> f64 {
        let inv = linalg::try_invert(&self.shape).expect("shape is PD by construction");
        2.0 * (self.threshold * inv[(j, j)]).sqrt()
    }

    /// Interval endpoints for the scalar case.
    pub fn interval(&self) -> Option<(f64, f64)> {
        if self.center.len() != 1 {
            return None;
        }
        let half = (self.threshold / self.shape[(0, 0)]).sqrt();
        Some((self.center[0] - half, self.center[0] + half))
    }
}

fn sorted<'a>(summaries: &'a [BlockSummary]) -> Result<Vec<&'a BlockSummary>, AggregationError> {
    if summaries.is_empty() {
        return Err(AggregationError::Empty);
    }
    let p1 = summaries[0].p1();
    if summaries
        .iter()
        .any(|s| s.p1() != p1 || s.h_inv.nrows() != p1 || s.h_inv.ncols() != p1)
    {
        return Err(AggregationError::DimensionMismatch);
    }
    let mut refs: Vec<&BlockSummary> = summaries.iter().collect();
    refs.sort_by_key(|s| s.k);
    Ok(refs)
}

fn sac_point(refs: &[&BlockSummary]) -> DVector<f64> {
    let p1 = refs[0].p1();
    let n_total: f64 = refs.iter().map(|s| s.n as f64).sum();
    let mut phi = DVector::zeros(p1);
    for s in refs {
        phi += s.n as f64 * &s.phi_hat;
    }
    phi / n_total
}

/// N^2 (sum n_k H_k)^-1, the SaC/dSaC standardizer; `None` when any block's
/// h_inv cannot be inverted back to H_k.
fn sac_standardizer(refs: &[&BlockSummary]) -> Option<DMatrix<f64>> {
    let p1 = refs[0].p1();
    let n_total: f64 = refs.iter().map(|s| s.n as f64).sum();
    let mut acc = DMatrix::zeros(p1, p1);
    for s in refs {
        let h = linalg::try_invert(&s.h_inv)?;
        acc += s.n as f64 * h;
    }
    linalg::try_invert(&acc).map(|inv| n_total * n_total * linalg::symmetrize(&inv))
}

/// Split-and-conquer: the sample-size weighted average of local estimates.
pub fn sac(summaries: &[BlockSummary]) -> Result<AggregateEstimate, AggregationError> {
    let refs = sorted(summaries)?;
    Ok(AggregateEstimate {
        phi: sac_point(&refs),
        kind: EstimatorKind::Sac,
        standardizer: sac_standardizer(&refs),
        fallback_used: false,
    })
}

/// Weighted distributed estimator with matrix weights proportional to
/// n_k Hinv_k, falling back to SaC when the weighted point leaves the
/// common box.
pub fn wd(
    summaries: &[BlockSummary],
    common_box: &ParameterBox,
) -> Result<AggregateEstimate, AggregationError> {
    let refs = sorted(summaries)?;
    let p1 = refs[0].p1();
    let good: Vec<&&BlockSummary> = refs.iter().filter(|s| !s.degraded).collect();
    if good.is_empty() {
        return Err(AggregationError::AllDegraded);
    }
    let mut w_sum = DMatrix::zeros(p1, p1);
    let mut rhs = DVector::zeros(p1);
    for s in &good {
        w_sum += s.n as f64 * &s.h_inv;
        rhs += s.n as f64 * (&s.h_inv * &s.phi_hat);
    }
    let w_inv = linalg::try_invert(&w_sum).ok_or(AggregationError::AllDegraded)?;
    let weighted = &w_inv * rhs;
    let (phi, fallback_used) = if common_box.contains_common(weighted.as_slice()) {
        (weighted, false)
    } else {
        (sac_point(&refs), true)
    };
    Ok(AggregateEstimate {
        phi,
        kind: EstimatorKind::Wd,
        standardizer: Some(linalg::symmetrize(&w_sum)),
        fallback_used,
    })
}

/// Debiased SaC: the SaC fold over bias-corrected local estimates.
pub fn dsac(summaries: &[BlockSummary]) -> Result<AggregateEstimate, AggregationError> {
    let refs = sorted(summaries)?;
    if let Some(s) = refs.iter().find(|s| !s.bias_corrected) {
        return Err(AggregationError::NotBiasCorrected { k: s.k });
    }
    Ok(AggregateEstimate {
        phi: sac_point(&refs),
        kind: EstimatorKind::DSac,
        standardizer: sac_standardizer(&refs),
        fallback_used: false,
    })
}

/// Debiased weighted distributed estimator: weights from one half of each
/// block applied to the debiased estimates from the other half, averaged
/// over the two pairings.
pub fn dwd(
    summaries: &[BlockSummary],
    common_box: &ParameterBox,
) -> Result<AggregateEstimate, AggregationError> {
    let refs = sorted(summaries)?;
    let p1 = refs[0].p1();
    for s in &refs {
        let t = s.twin.as_deref().ok_or(AggregationError::MissingTwin { k: s.k })?;
        if t.p1() != p1 {
            return Err(AggregationError::DimensionMismatch);
        }
        if !s.bias_corrected || !t.bias_corrected {
            return Err(AggregationError::NotBiasCorrected { k: s.k });
        }
    }

    // A block with either half degraded drops out of both weighted folds.
    let good: Vec<&&BlockSummary> = refs
        .iter()
        .filter(|s| !s.degraded && !s.twin.as_deref().unwrap().degraded)
        .collect();
    if good.is_empty() {
        return Err(AggregationError::AllDegraded);
    }

    let n_total: f64 = refs.iter().map(|s| s.n as f64).sum();
    let mut fallback_used = false;
    let mut averaged = DVector::zeros(p1);
    let mut standardizer = DMatrix::zeros(p1, p1);

    for s_idx in 0..2 {
        let mut w_sum = DMatrix::zeros(p1, p1);
        let mut rhs = DVector::zeros(p1);
        let mut fallback_target = DVector::zeros(p1);
        for s in &good {
            let twin = s.twin.as_deref().unwrap();
            // Weights from split s, estimates from the other split.
            let (weight_half, est_half) = if s_idx == 0 {
                (&s.h_inv, &twin.phi_hat)
            } else {
                (&twin.h_inv, &s.phi_hat)
            };
            w_sum += s.n as f64 * weight_half;
            rhs += s.n as f64 * (weight_half * est_half);
        }
        for s in &refs {
            let twin = s.twin.as_deref().unwrap();
            let est_half = if s_idx == 0 { &twin.phi_hat } else { &s.phi_hat };
            fallback_target += s.n as f64 * est_half;
        }
        fallback_target /= n_total;

        let w_inv = linalg::try_invert(&w_sum).ok_or(AggregationError::AllDegraded)?;
        let weighted = &w_inv * rhs;
        let phi_s = if common_box.contains_common(weighted.as_slice()) {
            weighted
        } else {
            fallback_used = true;
            fallback_target
        };
        averaged += phi_s;
        standardizer += w_sum;
    }
    averaged /= 2.0;
    standardizer /= 2.0;

    Ok(AggregateEstimate {
        phi: averaged,
        kind: EstimatorKind::DWd,
        standardizer: Some(linalg::symmetrize(&standardizer)),
        fallback_used,
    })
}

/// Inputs to the subsampled average mixture estimator for one block.
#[derive(Debug, Clone)]
pub struct SavgmBlock {
    pub k: usize,
    pub n: usize,
    /// Full-block fit.
    pub theta_hat: ParameterVector,
    /// Fit on the floor(r n) subsample.
    pub theta_sub: ParameterVector,
    pub n_sub: usize,
}

/// Richardson-style extrapolation (theta - r theta_r) / (1 - r) per block,
/// aggregated over blocks as in SaC.
pub fn savgm(blocks: &[SavgmBlock], r: f64) -> Result<AggregateEstimate, AggregationError> {
    if blocks.is_empty() {
        return Err(AggregationError::Empty);
    }
    assert!(r > 0.0 && r < 1.0, "subsampling rate must be in (0, 1)");
    let p1 = blocks[0].theta_hat.p1();
    let p = blocks[0].theta_hat.p();
    let mut refs: Vec<&SavgmBlock> = blocks.iter().collect();
    refs.sort_by_key(|b| b.k);
    let n_total: f64 = refs.iter().map(|b| b.n as f64).sum();
    let mut phi = DVector::zeros(p1);
    for b in &refs {
        if b.theta_hat.p1() != p1 || b.theta_sub.p() != p {
            return Err(AggregationError::DimensionMismatch);
        }
        let expected_sub = (r * b.n as f64).floor() as usize;
        if b.n_sub < p || b.n_sub != expected_sub {
            return Err(AggregationError::SubsampleTooSmall {
                k: b.k,
                needed: p.max(expected_sub),
                got: b.n_sub,
            });
        }
        for j in 0..p1 {
            let extr = (b.theta_hat.flat()[j] - r * b.theta_sub.flat()[j]) / (1.0 - r);
            phi[j] += b.n as f64 * extr;
        }
    }
    phi /= n_total;
    Ok(AggregateEstimate {
        phi,
        kind: EstimatorKind::Savgm,
        standardizer: None,
        fallback_used: false,
    })
}

/// Chi-square confidence region for an aggregate at level 1 - alpha.
pub fn confidence_region(
    est: &AggregateEstimate,
    alpha: f64,
) -> Result<ConfidenceRegion, AggregationError> {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must be in (0, 1)");
    let shape = est
        .standardizer
        .clone()
        .ok_or_else(|| AggregationError::NoRegion {
            reason: format!("{} provides no standardizer", est.kind),
        })?;
    if !linalg::is_positive_definite(&shape, 1e-10) {
        return Err(AggregationError::NoRegion {
            reason: "standardizer is not positive definite".into(),
        });
    }
    let p1 = est.phi.len();
    Ok(ConfidenceRegion {
        center: est.phi.clone(),
        shape,
        threshold: chisq_quantile(p1, alpha),
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_summary(k: usize, n: usize, phi: f64, h: f64) -> BlockSummary {
        BlockSummary::new(
            k,
            n,
            DVector::from_element(1, phi),
            DMatrix::from_element(1, 1, 1.0 / h),
            false,
        )
    }

    #[test]
    fn sac_weighted_average() {
        let s = vec![scalar_summary(0, 100, 1.0, 1.0), scalar_summary(1, 300, 2.0, 1.0)];
        let est = sac(&s).unwrap();
        assert!((est.phi[0] - 1.75).abs() < 1e-14);
        assert!(!est.fallback_used);
    }

    #[test]
    fn sac_single_block_is_identity() {
        let s = vec![scalar_summary(3, 50, 0.4, 2.0)];
        let est = sac(&s).unwrap();
        assert_eq!(est.phi[0], 0.4);
    }

    #[test]
    fn wd_scalar_weights() {
        // H = (2, 1) with equal n: weights (1/3, 2/3).
        let s = vec![scalar_summary(0, 10, 3.0, 2.0), scalar_summary(1, 10, 6.0, 1.0)];
        let pbox = ParameterBox::symmetric(1, 1, 50.0);
        let est = wd(&s, &pbox).unwrap();
        assert!((est.phi[0] - (3.0 / 3.0 + 2.0 * 6.0 / 3.0)).abs() < 1e-12);
        assert!(!est.fallback_used);
    }

    #[test]
    fn wd_equals_sac_for_equal_summaries() {
        let s = vec![
            scalar_summary(0, 20, 1.2, 0.7),
            scalar_summary(1, 20, 0.8, 0.7),
        ];
        let pbox = ParameterBox::symmetric(1, 1, 50.0);
        let w = wd(&s, &pbox).unwrap();
        let a = sac(&s).unwrap();
        assert!((w.phi[0] - a.phi[0]).abs() < 1e-14);
    }

    #[test]
    fn wd_box_fallback_returns_sac() {
        // Weighted point would be far outside a tiny box.
        let s = vec![
            scalar_summary(0, 10, 5.0, 0.01),
            scalar_summary(1, 10, -1.0, 10.0),
        ];
        let tiny = ParameterBox::new(vec![-2.0], vec![2.0], 1).unwrap();
        let est = wd(&s, &tiny).unwrap();
        assert!(est.fallback_used);
        assert!((est.phi[0] - 2.0).abs() < 1e-12); // SaC = (5 - 1) / 2
    }

    #[test]
    fn wd_excludes_degraded_blocks() {
        let mut bad = scalar_summary(0, 10, 100.0, 1.0);
        bad.h_inv = DMatrix::from_element(1, 1, -1.0);
        bad.degraded = !linalg::is_positive_definite(&bad.h_inv, 1e-10);
        assert!(bad.degraded);
        let s = vec![bad, scalar_summary(1, 10, 2.0, 1.0)];
        let pbox = ParameterBox::symmetric(1, 1, 500.0);
        let est = wd(&s, &pbox).unwrap();
        assert!((est.phi[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn wd_all_degraded_is_an_error() {
        let mut bad = scalar_summary(0, 10, 1.0, 1.0);
        bad.h_inv = DMatrix::from_element(1, 1, -1.0);
        bad.degraded = true;
        assert!(matches!(
            wd(&[bad], &ParameterBox::symmetric(1, 1, 1.0)),
            Err(AggregationError::AllDegraded)
        ));
    }

    #[test]
    fn dsac_arithmetic() {
        let mut a = scalar_summary(0, 100, 0.8, 1.0);
        let mut b = scalar_summary(1, 100, 1.2, 1.0);
        a.bias_corrected = true;
        b.bias_corrected = true;
        let est = dsac(&[a, b]).unwrap();
        assert!((est.phi[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dsac_requires_bias_corrected() {
        let s = vec![scalar_summary(0, 10, 1.0, 1.0)];
        assert!(matches!(
            dsac(&s),
            Err(AggregationError::NotBiasCorrected { k: 0 })
        ));
    }

    fn dwd_block(
        k: usize,
        n: usize,
        phi1: f64,
        h1: f64,
        phi2: f64,
        h2: f64,
    ) -> BlockSummary {
        let mut first = scalar_summary(k, n, phi1, h1);
        first.bias_corrected = true;
        let mut second = scalar_summary(k, n, phi2, h2);
        second.bias_corrected = true;
        first.with_twin(second)
    }

    #[test]
    fn dwd_hand_computed_cross_weighting() {
        // Two blocks, scalar case. Weights from split s applied to the other
        // split's estimates.
        let blocks = vec![
            dwd_block(0, 10, 1.0, 2.0, 3.0, 4.0),
            dwd_block(1, 10, 2.0, 1.0, 5.0, 2.0),
        ];
        // h_inv entries: block0 (1/2, 1/4); block1 (1, 1/2).
        // s=1: weights (1/2, 1) on estimates (3, 5):
        //   (0.5*3 + 1*5) / 1.5 = 6.5 / 1.5
        // s=2: weights (1/4, 1/2) on estimates (1, 2):
        //   (0.25*1 + 0.5*2) / 0.75 = 1.25 / 0.75
        let expect = 0.5 * (6.5 / 1.5 + 1.25 / 0.75);
        let pbox = ParameterBox::symmetric(1, 1, 50.0);
        let est = dwd(&blocks, &pbox).unwrap();
        assert!((est.phi[0] - expect).abs() < 1e-12, "{} vs {expect}", est.phi[0]);
    }

    /// The aligned (same-half) combination, the foil for the cross-pairing
    /// check: weights from split s applied to split s's own estimates.
    fn dwd_aligned(blocks: &[BlockSummary]) -> f64 {
        let mut avg = 0.0;
        for s in 0..2 {
            let mut num = 0.0;
            let mut den = 0.0;
            for b in blocks {
                let t = b.twin.as_deref().unwrap();
                let (phi, hinv) = if s == 0 {
                    (b.phi_hat[0], b.h_inv[(0, 0)])
                } else {
                    (t.phi_hat[0], t.h_inv[(0, 0)])
                };
                num += b.n as f64 * hinv * phi;
                den += b.n as f64 * hinv;
            }
            avg += num / den;
        }
        avg / 2.0
    }

    #[test]
    fn dwd_cross_pairing_detects_half_asymmetry() {
        let pbox = ParameterBox::symmetric(1, 1, 50.0);
        // Halves of each block share the same H: cross and aligned pairings
        // coincide, confirming nothing else differs.
        let sym = vec![
            dwd_block(0, 10, 1.0, 2.0, 3.0, 2.0),
            dwd_block(1, 10, 2.0, 1.0, 5.0, 1.0),
        ];
        let cross = dwd(&sym, &pbox).unwrap();
        assert!((cross.phi[0] - dwd_aligned(&sym)).abs() < 1e-12);

        // Halves with different H (and non-proportional weight patterns):
        // only the cross pairing matches its hand value, and it differs
        // from the aligned combination.
        let asym = vec![
            dwd_block(0, 10, 1.0, 2.0, 3.0, 4.0),
            dwd_block(1, 10, 2.0, 1.0, 5.0, 1.0),
        ];
        let cross = dwd(&asym, &pbox).unwrap();
        // h_inv: block0 (1/2, 1/4), block1 (1, 1).
        // s=1: weights (1/2, 1) on estimates (3, 5) -> (1.5 + 5) / 1.5
        // s=2: weights (1/4, 1) on estimates (1, 2) -> (0.25 + 2) / 1.25
        let expect = 0.5 * (6.5 / 1.5 + 2.25 / 1.25);
        assert!((cross.phi[0] - expect).abs() < 1e-12);
        assert!((cross.phi[0] - dwd_aligned(&asym)).abs() > 1e-3);
    }

    #[test]
    fn dwd_identical_halves_equal_debiased_sac() {
        // Identical halves and equal H across blocks: dWD = SaC of the
        // debiased estimates.
        let blocks = vec![
            dwd_block(0, 10, 1.0, 2.0, 1.0, 2.0),
            dwd_block(1, 10, 3.0, 2.0, 3.0, 2.0),
        ];
        let pbox = ParameterBox::symmetric(1, 1, 50.0);
        let est = dwd(&blocks, &pbox).unwrap();
        assert!((est.phi[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn savgm_extrapolation() {
        let mk = |k: usize, full: f64, sub: f64| SavgmBlock {
            k,
            n: 100,
            theta_hat: ParameterVector::from_flat(vec![full], 1).unwrap(),
            theta_sub: ParameterVector::from_flat(vec![sub], 1).unwrap(),
            n_sub: 5,
        };
        // Fixed point: sub = full leaves the estimate unchanged.
        let est = savgm(&[mk(0, 1.0, 1.0)], 0.05).unwrap();
        assert!((est.phi[0] - 1.0).abs() < 1e-14);
        // Hand value: (1.0 - 0.05 * 1.2) / 0.95.
        let est = savgm(&[mk(0, 1.0, 1.2)], 0.05).unwrap();
        assert!((est.phi[0] - (1.0 - 0.06) / 0.95).abs() < 1e-14);
        assert!(est.standardizer.is_none());
    }

    #[test]
    fn savgm_refuses_undersized_subsample() {
        let b = SavgmBlock {
            k: 0,
            n: 100,
            theta_hat: ParameterVector::from_flat(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1).unwrap(),
            theta_sub: ParameterVector::from_flat(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1).unwrap(),
            n_sub: 5,
        };
        assert!(matches!(
            savgm(&[b], 0.05),
            Err(AggregationError::SubsampleTooSmall { .. })
        ));
    }

    #[test]
    fn confidence_region_scalar_interval() {
        let s = vec![scalar_summary(0, 100, 1.0, 1.0), scalar_summary(1, 100, 1.0, 1.0)];
        let pbox = ParameterBox::symmetric(1, 1, 50.0);
        let est = wd(&s, &pbox).unwrap();
        let region = confidence_region(&est, 0.05).unwrap();
        // Shape = sum n_k Hinv_k = 200; half-width = 1.95996 / sqrt(200).
        assert!((region.threshold - 3.841_458_8).abs() < 1e-6);
        let (lo, hi) = region.interval().unwrap();
        let half = 1.959_963_984_540_054 / 200.0f64.sqrt();
        assert!((hi - lo - 2.0 * half).abs() < 1e-9);
        assert!(region.contains(&[est.phi[0]]));
        assert!((region.width(0) - (hi - lo)).abs() < 1e-12);
    }

    #[test]
    fn region_always_contains_center() {
        let s = vec![scalar_summary(0, 10, -0.3, 0.5)];
        let est = sac(&s).unwrap();
        for &alpha in &[0.01, 0.05, 0.5, 0.99] {
            let r = confidence_region(&est, alpha).unwrap();
            assert!(r.contains(&[-0.3]));
        }
    }

    #[test]
    fn savgm_has_no_region() {
        let b = SavgmBlock {
            k: 0,
            n: 100,
            theta_hat: ParameterVector::from_flat(vec![1.0], 1).unwrap(),
            theta_sub: ParameterVector::from_flat(vec![1.0], 1).unwrap(),
            n_sub: 5,
        };
        let est = savgm(&[b], 0.05).unwrap();
        assert!(matches!(
            confidence_region(&est, 0.05),
            Err(AggregationError::NoRegion { .. })
        ));
    }

    #[test]
    fn order_independence() {
        let a = vec![
            scalar_summary(0, 10, 1.0, 2.0),
            scalar_summary(1, 30, 2.0, 1.0),
            scalar_summary(2, 20, -1.0, 3.0),
        ];
        let mut b = a.clone();
        b.reverse();
        let pbox = ParameterBox::symmetric(1, 1, 50.0);
        assert_eq!(sac(&a).unwrap().phi, sac(&b).unwrap().phi);
        assert_eq!(wd(&a, &pbox).unwrap().phi, wd(&b, &pbox).unwrap().phi);
    }

    #[test]
    fn homogeneous_degeneracy_sac_wd_dsac_agree() {
        let mut s: Vec<BlockSummary> = (0..4).map(|k| scalar_summary(k, 25, 1.5, 0.8)).collect();
        let pbox = ParameterBox::symmetric(1, 1, 50.0);
        let sac_est = sac(&s).unwrap();
        let wd_est = wd(&s, &pbox).unwrap();
        for x in s.iter_mut() {
            x.bias_corrected = true; // zero bias: same estimates
        }
        let dsac_est = dsac(&s).unwrap();
        assert_eq!(sac_est.phi[0], wd_est.phi[0]);
        assert_eq!(sac_est.phi[0], dsac_est.phi[0]);
    }
}
