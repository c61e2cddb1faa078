//! Distributed M-estimation under block-wise heterogeneity.
//!
//! The crate provides the pieces of a one-round distributed estimation
//! pipeline for a parameter shared across heterogeneous data blocks:
//!
//! * [`model`] — M-function abstraction with exact derivatives to third
//!   order, plus the built-in logistic and errors-in-variables models;
//! * [`local`] — per-block Newton fits, sandwich covariances, second-order
//!   bias estimates, and the pooled full-sample benchmark;
//! * [`aggregate`] — coordinator-side estimators (SaC, WD, dSaC, dWD,
//!   SAVGM) and their chi-square confidence regions;
//! * [`asymptotics`] — closed-form asymptotic-variance oracles;
//! * [`simnet`] — simulated federation protocol and the Monte Carlo
//!   experiment engine.
//!
//! Replicate-level work parallelizes with `rayon` under the default
//! `parallel` feature; disabling it leaves a sequential engine with
//! identical output.

pub mod aggregate;
pub mod asymptotics;
pub mod linalg;
pub mod local;
pub mod model;
pub mod rng;
pub mod simnet;
pub mod special;

pub use aggregate::{AggregateEstimate, BlockSummary, ConfidenceRegion, EstimatorKind};
pub use local::{LocalFit, SolverOptions};
pub use model::{BlockModel, DataBlock, ParameterBox, ParameterVector};
