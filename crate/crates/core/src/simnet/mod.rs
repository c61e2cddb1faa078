//! Simulated one-round federation: seeded data generators, the
//! worker/coordinator protocol with byte accounting, and the Monte Carlo
//! experiment engine.

mod engine;
mod generate;
mod protocol;
mod report;

pub use engine::{monte_carlo, DesignConfig, ExperimentConfig};
pub use generate::{generate_eiv, generate_logistic, generate_logistic_with, logistic_lambda};
pub use protocol::{run_protocol, CommLog, Payload, ProtocolMessage};
pub use report::{
    EstimatorMetrics, EstimatorTiming, ExperimentReport, IntervalMetrics, SweepReport,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {detail}")]
    InvalidConfig { detail: String },
    #[error("fit failed: {0}")]
    Fit(#[from] crate::local::FitError),
    #[error("aggregation failed: {0}")]
    Aggregation(#[from] crate::aggregate::AggregationError),
    #[error("{failed} of {total} replicates failed (first: {example}); report invalid")]
    TooManyFailures {
        failed: usize,
        total: usize,
        example: String,
    },
}
