//! Experiment report: deterministic metrics plus an optional timing
//! side-channel. Everything outside `timing` is a pure function of the
//! configuration and master seed; stripping timing yields byte-stable
//! serialized reports.

use serde::{Deserialize, Serialize};

use crate::aggregate::EstimatorKind;

/// Coverage and width of the 1 - alpha confidence region. `None` entries
/// belong to estimators without a sampling distribution (SAVGM) or to
/// replicates where the region was unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub alpha: f64,
    pub coverage: Option<f64>,
    pub mean_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub kind: EstimatorKind,
    /// || mean(phi_hat) - phi* ||_2.
    pub abs_bias: f64,
    /// sqrt of the trace of the sample covariance of phi_hat.
    pub sd: f64,
    /// sqrt(mean || phi_hat - phi* ||^2).
    pub rmse: f64,
    pub mean_comm_bytes: f64,
    /// Fraction of replicates where the box fallback fired.
    pub fallback_rate: f64,
    pub intervals: Vec<IntervalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorTiming {
    pub kind: EstimatorKind,
    pub mean_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub design: String,
    pub k: usize,
    pub n_total: usize,
    pub p1: usize,
    pub p2: usize,
    pub replications: usize,
    pub seed: u64,
    pub phi_star: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Replicates excluded because an estimator failed.
    pub failures: usize,
    pub estimators: Vec<EstimatorMetrics>,
    /// Hardware-bound wall-clock means; not part of the deterministic
    /// content and skipped when absent.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<Vec<EstimatorTiming>>,
}

impl ExperimentReport {
    /// Drops the non-deterministic timing section.
    pub fn strip_timing(&mut self) {
        self.timing = None;
    }

    pub fn metrics_for(&self, kind: EstimatorKind) -> Option<&EstimatorMetrics> {
        self.estimators.iter().find(|e| e.kind == kind)
    }

    /// CSV rows, one per estimator and alpha level. Timing columns are
    /// emitted only when the timing section is present.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(Self::csv_header(self.timing.is_some()));
        out.push('\n');
        self.append_csv_rows(&mut out);
        out
    }

    pub fn csv_header(with_timing: bool) -> &'static str {
        if with_timing {
            "design,k,n_total,p2,b,seed,estimator,alpha,abs_bias,sd,rmse,coverage,mean_width,mean_comm_bytes,fallback_rate,failures,mean_wall_ms"
        } else {
            "design,k,n_total,p2,b,seed,estimator,alpha,abs_bias,sd,rmse,coverage,mean_width,mean_comm_bytes,fallback_rate,failures"
        }
    }

    pub fn append_csv_rows(&self, out: &mut String) {
        use std::fmt::Write;
        for est in &self.estimators {
            let timing = self
                .timing
                .as_ref()
                .and_then(|t| t.iter().find(|x| x.kind == est.kind));
            for iv in &est.intervals {
                let cov = iv
                    .coverage
                    .map(|c| format!("{c:.17e}"))
                    .unwrap_or_default();
                let width = iv
                    .mean_width
                    .map(|w| format!("{w:.17e}"))
                    .unwrap_or_default();
                write!(
                    out,
                    "{},{},{},{},{},{},{},{},{:.17e},{:.17e},{:.17e},{},{},{:.17e},{:.17e},{}",
                    self.design,
                    self.k,
                    self.n_total,
                    self.p2,
                    self.replications,
                    self.seed,
                    est.kind,
                    iv.alpha,
                    est.abs_bias,
                    est.sd,
                    est.rmse,
                    cov,
                    width,
                    est.mean_comm_bytes,
                    est.fallback_rate,
                    self.failures,
                )
                .expect("string formatting");
                if let Some(t) = timing {
                    write!(out, ",{:.6}", t.mean_wall_ms).expect("string formatting");
                }
                out.push('\n');
            }
        }
    }
}

/// Several reports over a grid (of K, typically), as produced by the
/// RMSE-versus-K experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<ExperimentReport>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let with_timing = self.runs.iter().any(|r| r.timing.is_some());
        let mut out = String::new();
        out.push_str(ExperimentReport::csv_header(with_timing));
        out.push('\n');
        for run in &self.runs {
            run.append_csv_rows(&mut out);
        }
        out
    }

    pub fn strip_timing(&mut self) {
        for r in &mut self.runs {
            r.strip_timing();
        }
    }
}
