//! One-round worker/coordinator protocol with byte accounting.
//!
//! Workers turn raw blocks into [`BlockSummary`] values; the payload types
//! below are the only objects that cross the coordinator boundary, and none
//! of them can carry data rows. Byte counts are payload scalars times eight.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    self, AggregateEstimate, BlockSummary, EstimatorKind, SavgmBlock,
};
use crate::local::{
    bias_estimate, debias_local, fit_local, fit_pooled, sandwich_covariance, split_halves,
    LocalFit, SolverOptions,
};
use crate::model::{BlockModel, DataBlock, ParameterBox, ParameterVector};
use crate::rng::CounterRng;

use super::SimError;

const TAG_SUBSAMPLE: u64 = 0x5AB;

/// What one worker sends for its block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Payload {
    /// phi_hat only.
    Sac { phi: DVector<f64> },
    /// phi_hat and the inverted sandwich block.
    Wd {
        phi: DVector<f64>,
        h_inv: DMatrix<f64>,
    },
    /// Bias-corrected phi_hat only.
    DSac { phi_bc: DVector<f64> },
    /// Both halves' (bias-corrected phi, inverted sandwich block).
    DWd {
        halves: [(DVector<f64>, DMatrix<f64>); 2],
    },
    /// Full-block and subsample parameter estimates.
    Savgm {
        theta: ParameterVector,
        theta_sub: ParameterVector,
    },
    /// The pooled benchmark ships its raw rows; only the volume is recorded
    /// here, never the values.
    RawData { scalars: usize },
}

impl Payload {
    pub fn scalar_count(&self) -> usize {
        match self {
            Payload::Sac { phi } => phi.len(),
            Payload::Wd { phi, h_inv } => phi.len() + h_inv.len(),
            Payload::DSac { phi_bc } => phi_bc.len(),
            Payload::DWd { halves } => halves.iter().map(|(p, h)| p.len() + h.len()).sum(),
            Payload::Savgm { theta, theta_sub } => theta.p() + theta_sub.p(),
            Payload::RawData { scalars } => *scalars,
        }
    }
}

/// One worker-to-coordinator message.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub block: usize,
    pub payload: Payload,
}

impl ProtocolMessage {
    /// Eight bytes per payload scalar.
    pub fn byte_count(&self) -> usize {
        8 * self.payload.scalar_count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct CommLog {
    pub messages: Vec<ProtocolMessage>,
}

impl CommLog {
    pub fn total_bytes(&self) -> usize {
        self.messages.iter().map(ProtocolMessage::byte_count).sum()
    }
}

fn h_inv_or_degraded(common: &DMatrix<f64>) -> DMatrix<f64> {
    // A failed inversion yields a zero matrix, which the summary
    // constructor marks as degraded.
    crate::linalg::try_invert(common).unwrap_or_else(|| DMatrix::zeros(common.nrows(), common.ncols()))
}

fn worker_fit(
    block: &DataBlock,
    model: &dyn BlockModel,
    pbox: &ParameterBox,
    opts: &SolverOptions,
) -> Result<(LocalFit, DMatrix<f64>), SimError> {
    let fit = fit_local(block, model, pbox, opts).map_err(SimError::from)?;
    let sandwich = sandwich_covariance(block, model, &fit.theta_hat).map_err(SimError::from)?;
    Ok((fit, h_inv_or_degraded(&sandwich.common)))
}

/// Executes the worker pipeline for `kind` on every block and folds the
/// summaries at the coordinator. The returned log holds exactly one message
/// per block. The pooled benchmark (`Full`) ships raw rows instead and its
/// byte accounting reflects that.
pub fn run_protocol(
    kind: EstimatorKind,
    blocks: &[DataBlock],
    model: &dyn BlockModel,
    pbox: &ParameterBox,
    opts: &SolverOptions,
    savgm_r: f64,
    seed: u64,
) -> Result<(AggregateEstimate, CommLog), SimError> {
    if blocks.is_empty() {
        return Err(SimError::InvalidConfig {
            detail: "no blocks to estimate from".into(),
        });
    }
    let mut log = CommLog::default();

    match kind {
        EstimatorKind::Sac | EstimatorKind::Wd => {
            let mut summaries = Vec::with_capacity(blocks.len());
            for b in blocks {
                let (fit, h_inv) = worker_fit(b, model, pbox, opts)?;
                let phi = DVector::from_column_slice(fit.theta_hat.common());
                log.messages.push(ProtocolMessage {
                    block: b.id(),
                    payload: match kind {
                        EstimatorKind::Sac => Payload::Sac { phi: phi.clone() },
                        _ => Payload::Wd {
                            phi: phi.clone(),
                            h_inv: h_inv.clone(),
                        },
                    },
                });
                summaries.push(BlockSummary::new(b.id(), b.n(), phi, h_inv, false));
            }
            let est = match kind {
                EstimatorKind::Sac => aggregate::sac(&summaries)?,
                _ => aggregate::wd(&summaries, pbox)?,
            };
            Ok((est, log))
        }
        EstimatorKind::DSac => {
            let mut summaries = Vec::with_capacity(blocks.len());
            for b in blocks {
                let (fit, h_inv) = worker_fit(b, model, pbox, opts)?;
                let bias = bias_estimate(b, model, &fit.theta_hat).map_err(SimError::from)?;
                let (theta_bc, _applied) = debias_local(&fit.theta_hat, &bias.bias, b.n(), pbox);
                let phi_bc = DVector::from_column_slice(theta_bc.common());
                log.messages.push(ProtocolMessage {
                    block: b.id(),
                    payload: Payload::DSac {
                        phi_bc: phi_bc.clone(),
                    },
                });
                summaries.push(BlockSummary::new(b.id(), b.n(), phi_bc, h_inv, true));
            }
            Ok((aggregate::dsac(&summaries)?, log))
        }
        EstimatorKind::DWd => {
            let mut summaries = Vec::with_capacity(blocks.len());
            for b in blocks {
                let split = split_halves(b, seed, model.p()).map_err(SimError::from)?;
                let mut half_summaries = Vec::with_capacity(2);
                for half in [&split.first, &split.second] {
                    let (fit, h_inv) = worker_fit(half, model, pbox, opts)?;
                    let bias =
                        bias_estimate(half, model, &fit.theta_hat).map_err(SimError::from)?;
                    let (theta_bc, _applied) =
                        debias_local(&fit.theta_hat, &bias.bias, half.n(), pbox);
                    let phi_bc = DVector::from_column_slice(theta_bc.common());
                    half_summaries.push((phi_bc, h_inv));
                }
                log.messages.push(ProtocolMessage {
                    block: b.id(),
                    payload: Payload::DWd {
                        halves: [
                            (half_summaries[0].0.clone(), half_summaries[0].1.clone()),
                            (half_summaries[1].0.clone(), half_summaries[1].1.clone()),
                        ],
                    },
                });
                let (phi2, hinv2) = half_summaries.pop().expect("two halves");
                let (phi1, hinv1) = half_summaries.pop().expect("two halves");
                let twin = BlockSummary::new(b.id(), b.n(), phi2, hinv2, true);
                summaries.push(BlockSummary::new(b.id(), b.n(), phi1, hinv1, true).with_twin(twin));
            }
            Ok((aggregate::dwd(&summaries, pbox)?, log))
        }
        EstimatorKind::Savgm => {
            let mut pairs = Vec::with_capacity(blocks.len());
            for b in blocks {
                let fit = fit_local(b, model, pbox, opts).map_err(SimError::from)?;
                let n_sub = (savgm_r * b.n() as f64).floor() as usize;
                if n_sub < model.p() {
                    return Err(SimError::InvalidConfig {
                        detail: format!(
                            "block {}: subsample of {n_sub} rows cannot fit {} parameters",
                            b.id(),
                            model.p()
                        ),
                    });
                }
                let mut rng = CounterRng::from_parts(&[TAG_SUBSAMPLE, seed, b.id() as u64]);
                let idx = rng.sample_indices(b.n(), n_sub);
                let sub = b.subset(&idx, b.id());
                let sub_fit = fit_local(&sub, model, pbox, opts).map_err(SimError::from)?;
                log.messages.push(ProtocolMessage {
                    block: b.id(),
                    payload: Payload::Savgm {
                        theta: fit.theta_hat.clone(),
                        theta_sub: sub_fit.theta_hat.clone(),
                    },
                });
                pairs.push(SavgmBlock {
                    k: b.id(),
                    n: b.n(),
                    theta_hat: fit.theta_hat,
                    theta_sub: sub_fit.theta_hat,
                    n_sub,
                });
            }
            Ok((aggregate::savgm(&pairs, savgm_r)?, log))
        }
        EstimatorKind::Full => {
            // The benchmark needs the raw rows at one place; account the
            // full data volume as its communication cost.
            let pooled = fit_pooled(blocks, model, pbox, opts).map_err(SimError::from)?;
            for b in blocks {
                log.messages.push(ProtocolMessage {
                    block: b.id(),
                    payload: Payload::RawData {
                        scalars: b.n() * b.row_len(),
                    },
                });
            }
            Ok((
                AggregateEstimate {
                    phi: pooled.phi,
                    kind: EstimatorKind::Full,
                    standardizer: None,
                    fallback_used: false,
                },
                log,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Quadratic;

    fn quad_blocks(k: usize, n: usize, seed: u64) -> Vec<DataBlock> {
        (0..k)
            .map(|ki| {
                let mut rng = CounterRng::from_parts(&[seed, ki as u64]);
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| vec![rng.next_normal(1.0, 1.0), rng.next_normal(0.0, 1.0)])
                    .collect();
                DataBlock::from_rows(ki, &rows).unwrap()
            })
            .collect()
    }

    #[test]
    fn byte_accounting_matches_payload_shapes() {
        let blocks = quad_blocks(3, 60, 17);
        let model = Quadratic::new(1, 1);
        let pbox = ParameterBox::symmetric(2, 1, 50.0);
        let opts = SolverOptions::default();

        let (_, log) = run_protocol(
            EstimatorKind::Sac,
            &blocks,
            &model,
            &pbox,
            &opts,
            0.05,
            1,
        )
        .unwrap();
        assert_eq!(log.messages.len(), 3);
        assert!(log.messages.iter().all(|m| m.byte_count() == 8));

        let (_, log) =
            run_protocol(EstimatorKind::Wd, &blocks, &model, &pbox, &opts, 0.05, 1).unwrap();
        assert!(log.messages.iter().all(|m| m.byte_count() == 16));

        let (_, log) =
            run_protocol(EstimatorKind::DSac, &blocks, &model, &pbox, &opts, 0.05, 1).unwrap();
        assert!(log.messages.iter().all(|m| m.byte_count() == 8));

        let (_, log) =
            run_protocol(EstimatorKind::DWd, &blocks, &model, &pbox, &opts, 0.05, 1).unwrap();
        assert!(log.messages.iter().all(|m| m.byte_count() == 32));

        let (_, log) =
            run_protocol(EstimatorKind::Savgm, &blocks, &model, &pbox, &opts, 0.1, 1).unwrap();
        // theta and theta_sub are p = 2 each.
        assert!(log.messages.iter().all(|m| m.byte_count() == 32));
    }

    #[test]
    fn homogeneous_blocks_make_all_estimators_agree() {
        // Quadratic model: zero bias and equal sandwiches in expectation;
        // with identical data in every block the estimators coincide.
        let one = quad_blocks(1, 80, 23).pop().unwrap();
        let blocks: Vec<DataBlock> = (0..3)
            .map(|k| {
                DataBlock::from_rows(k, &one.rows().map(|r| r.to_vec()).collect::<Vec<_>>())
                    .unwrap()
            })
            .collect();
        let model = Quadratic::new(1, 1);
        let pbox = ParameterBox::symmetric(2, 1, 50.0);
        let opts = SolverOptions::default();
        let mut values = Vec::new();
        for kind in [
            EstimatorKind::Sac,
            EstimatorKind::Wd,
            EstimatorKind::DSac,
            EstimatorKind::Full,
        ] {
            let (est, _) =
                run_protocol(kind, &blocks, &model, &pbox, &opts, 0.05, 3).unwrap();
            values.push(est.phi[0]);
        }
        for v in &values[1..] {
            assert!(
                (v - values[0]).abs() < 1e-8,
                "estimators disagree: {values:?}"
            );
        }
    }

    #[test]
    fn full_accounts_raw_data_volume() {
        let blocks = quad_blocks(2, 50, 29);
        let model = Quadratic::new(1, 1);
        let pbox = ParameterBox::symmetric(2, 1, 50.0);
        let (_, log) = run_protocol(
            EstimatorKind::Full,
            &blocks,
            &model,
            &pbox,
            &SolverOptions::default(),
            0.05,
            1,
        )
        .unwrap();
        assert_eq!(log.total_bytes(), 2 * 50 * 2 * 8);
    }

    #[test]
    fn dwd_split_seed_is_respected() {
        let blocks = quad_blocks(2, 40, 31);
        let model = Quadratic::new(1, 1);
        let pbox = ParameterBox::symmetric(2, 1, 50.0);
        let opts = SolverOptions::default();
        let (a, _) =
            run_protocol(EstimatorKind::DWd, &blocks, &model, &pbox, &opts, 0.05, 7).unwrap();
        let (b, _) =
            run_protocol(EstimatorKind::DWd, &blocks, &model, &pbox, &opts, 0.05, 7).unwrap();
        let (c, _) =
            run_protocol(EstimatorKind::DWd, &blocks, &model, &pbox, &opts, 0.05, 8).unwrap();
        assert_eq!(a.phi, b.phi);
        assert_ne!(a.phi, c.phi);
    }
}
