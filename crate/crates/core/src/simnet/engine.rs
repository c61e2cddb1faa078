//! Monte Carlo experiment engine. Replicates are independent: each derives
//! its own seed from (master seed, replicate index), so the report is a
//! pure function of the configuration no matter how work is scheduled.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregate::{confidence_region, EstimatorKind};
use crate::asymptotics::EivScenario;
use crate::local::SolverOptions;
use crate::model::{BlockModel, DataBlock, ErrorsInVariables, Logistic, ParameterBox};
use crate::rng::CounterRng;

use super::generate::{generate_eiv, generate_logistic, generate_logistic_with};
use super::protocol::run_protocol;
use super::report::{
    EstimatorMetrics, EstimatorTiming, ExperimentReport, IntervalMetrics,
};
use super::SimError;

/// Which data-generating design an experiment runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DesignConfig {
    /// Two-block errors-in-variables design.
    Eiv {
        scenario: EivScenario,
        n_per_block: Vec<usize>,
    },
    /// K-block heterogeneous logistic design with the +-10 slope ramp.
    Logistic {
        k: usize,
        n: usize,
        p2: usize,
        phi_star: f64,
    },
    /// Logistic blocks sharing one parameter vector; the whole vector is
    /// common (p2 = 0).
    LogisticHomogeneous {
        k: usize,
        n: usize,
        theta_star: Vec<f64>,
    },
}

impl DesignConfig {
    pub fn label(&self) -> &'static str {
        match self {
            DesignConfig::Eiv { .. } => "eiv",
            DesignConfig::Logistic { .. } => "logistic",
            DesignConfig::LogisticHomogeneous { .. } => "logistic-homogeneous",
        }
    }

    pub fn k(&self) -> usize {
        match self {
            DesignConfig::Eiv { n_per_block, .. } => n_per_block.len(),
            DesignConfig::Logistic { k, .. } => *k,
            DesignConfig::LogisticHomogeneous { k, .. } => *k,
        }
    }

    pub fn n_total(&self) -> usize {
        match self {
            DesignConfig::Eiv { n_per_block, .. } => n_per_block.iter().sum(),
            DesignConfig::Logistic { k, n, .. } => k * n,
            DesignConfig::LogisticHomogeneous { k, n, .. } => k * n,
        }
    }

    pub fn p1(&self) -> usize {
        match self {
            DesignConfig::Eiv { .. } => 1,
            DesignConfig::Logistic { .. } => 1,
            DesignConfig::LogisticHomogeneous { theta_star, .. } => theta_star.len(),
        }
    }

    pub fn p2(&self) -> usize {
        match self {
            DesignConfig::Eiv { .. } => 1,
            DesignConfig::Logistic { p2, .. } => *p2,
            DesignConfig::LogisticHomogeneous { .. } => 0,
        }
    }

    pub fn phi_star(&self) -> Vec<f64> {
        match self {
            DesignConfig::Eiv { scenario, .. } => vec![scenario.phi_star],
            DesignConfig::Logistic { phi_star, .. } => vec![*phi_star],
            DesignConfig::LogisticHomogeneous { theta_star, .. } => theta_star.clone(),
        }
    }

    pub fn model(&self) -> Box<dyn BlockModel> {
        match self {
            DesignConfig::Eiv { scenario, .. } => {
                Box::new(ErrorsInVariables::new(scenario.sigma2))
            }
            DesignConfig::Logistic { p2, .. } => Box::new(Logistic::new(1, *p2)),
            DesignConfig::LogisticHomogeneous { theta_star, .. } => {
                Box::new(Logistic::new(theta_star.len(), 0))
            }
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<DataBlock>, SimError> {
        match self {
            DesignConfig::Eiv {
                scenario,
                n_per_block,
            } => Ok(generate_eiv(scenario, n_per_block, seed)),
            DesignConfig::Logistic { k, n, p2, phi_star } => {
                generate_logistic(*k, *n, *p2, *phi_star, seed)
            }
            DesignConfig::LogisticHomogeneous { k, n, theta_star } => {
                let thetas = vec![theta_star.clone(); *k];
                Ok(generate_logistic_with(&thetas, *n, seed))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub design: DesignConfig,
    pub estimators: Vec<EstimatorKind>,
    /// Number of Monte Carlo replications (B).
    pub replications: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub savgm_r: f64,
    pub box_radius: f64,
    /// Worker threads: `None` uses the ambient pool, `Some(1)` forces the
    /// sequential path. Output is identical either way.
    pub threads: Option<usize>,
    pub solver: SolverOptions,
}

impl ExperimentConfig {
    pub fn new(design: DesignConfig, estimators: Vec<EstimatorKind>, replications: usize) -> Self {
        ExperimentConfig {
            design,
            estimators,
            replications,
            alphas: vec![0.05],
            seed: 0,
            savgm_r: 0.05,
            box_radius: 50.0,
            threads: None,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.replications == 0 {
            return Err(SimError::InvalidConfig {
                detail: "B must be at least 1".into(),
            });
        }
        if self.estimators.is_empty() {
            return Err(SimError::InvalidConfig {
                detail: "estimator set is empty".into(),
            });
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(SimError::InvalidConfig {
                detail: "alpha levels must lie in (0, 1)".into(),
            });
        }
        if !(self.savgm_r > 0.0 && self.savgm_r < 1.0) {
            return Err(SimError::InvalidConfig {
                detail: "SAVGM subsampling rate must lie in (0, 1)".into(),
            });
        }
        if self.box_radius <= 0.0 {
            return Err(SimError::InvalidConfig {
                detail: "box radius must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn parameter_box(&self) -> ParameterBox {
        let p1 = self.design.p1();
        let p = p1 + self.design.p2();
        ParameterBox::symmetric(p, p1, self.box_radius)
    }
}

struct EstimatorOutcome {
    phi: Vec<f64>,
    covered: Vec<Option<bool>>,
    widths: Vec<Option<f64>>,
    bytes: usize,
    fallback: bool,
    nanos: u128,
}

enum ReplicateOutcome {
    Ok(Vec<EstimatorOutcome>),
    Failed(String),
}

fn replicate_seed(master: u64, rep: usize) -> u64 {
    CounterRng::from_parts(&[0x5EED, master, rep as u64]).next_u64()
}

fn run_replicate(cfg: &ExperimentConfig, rep: usize) -> ReplicateOutcome {
    let seed = replicate_seed(cfg.seed, rep);
    let blocks = match cfg.design.generate(seed) {
        Ok(b) => b,
        Err(e) => return ReplicateOutcome::Failed(format!("generation: {e}")),
    };
    let model = cfg.design.model();
    let pbox = cfg.parameter_box();
    let phi_star = cfg.design.phi_star();

    let mut outcomes = Vec::with_capacity(cfg.estimators.len());
    for &kind in &cfg.estimators {
        let start = Instant::now();
        let result = run_protocol(
            kind,
            &blocks,
            model.as_ref(),
            &pbox,
            &cfg.solver,
            cfg.savgm_r,
            seed,
        );
        let nanos = start.elapsed().as_nanos();
        let (est, log) = match result {
            Ok(v) => v,
            Err(e) => return ReplicateOutcome::Failed(format!("{kind}: {e}")),
        };
        let mut covered = Vec::with_capacity(cfg.alphas.len());
        let mut widths = Vec::with_capacity(cfg.alphas.len());
        for &alpha in &cfg.alphas {
            match confidence_region(&est, alpha) {
                Ok(region) => {
                    covered.push(Some(region.contains(&phi_star)));
                    widths.push(Some(region.width(0)));
                }
                Err(_) => {
                    covered.push(None);
                    widths.push(None);
                }
            }
        }
        outcomes.push(EstimatorOutcome {
            phi: est.phi.as_slice().to_vec(),
            covered,
            widths,
            bytes: log.total_bytes(),
            fallback: est.fallback_used,
            nanos,
        });
    }
    ReplicateOutcome::Ok(outcomes)
}

#[cfg(feature = "parallel")]
fn run_all(cfg: &ExperimentConfig) -> Vec<ReplicateOutcome> {
    use rayon::prelude::*;
    let run = || {
        (0..cfg.replications)
            .into_par_iter()
            .map(|rep| run_replicate(cfg, rep))
            .collect()
    };
    match cfg.threads {
        Some(1) => (0..cfg.replications)
            .map(|rep| run_replicate(cfg, rep))
            .collect(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .expect("thread pool")
            .install(run),
        None => run(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_all(cfg: &ExperimentConfig) -> Vec<ReplicateOutcome> {
    (0..cfg.replications)
        .map(|rep| run_replicate(cfg, rep))
        .collect()
}

/// Compensated (Kahan) accumulator; keeps metric folds independent of
/// summation order at full double precision.
#[derive(Default, Clone, Copy)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// Runs B seeded replicates of every configured estimator and aggregates
/// bias, spread, coverage, width, communication, and timing metrics.
/// Replicate failures are excluded and counted; more than 1% of them
/// invalidates the report.
pub fn monte_carlo(cfg: &ExperimentConfig) -> Result<ExperimentReport, SimError> {
    cfg.validate()?;
    let outcomes = run_all(cfg);

    let mut failures = 0usize;
    let mut failure_example = None;
    let mut successes: Vec<&Vec<EstimatorOutcome>> = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        match o {
            ReplicateOutcome::Ok(v) => successes.push(v),
            ReplicateOutcome::Failed(msg) => {
                failures += 1;
                if failure_example.is_none() {
                    failure_example = Some(msg.clone());
                }
            }
        }
    }
    if failures * 100 > cfg.replications {
        return Err(SimError::TooManyFailures {
            failed: failures,
            total: cfg.replications,
            example: failure_example.unwrap_or_default(),
        });
    }
    if successes.is_empty() {
        return Err(SimError::TooManyFailures {
            failed: failures,
            total: cfg.replications,
            example: failure_example.unwrap_or_default(),
        });
    }

    let b = successes.len();
    let p1 = cfg.design.p1();
    let phi_star = cfg.design.phi_star();
    let mut estimators = Vec::with_capacity(cfg.estimators.len());
    let mut timing = Vec::with_capacity(cfg.estimators.len());

    for (ei, &kind) in cfg.estimators.iter().enumerate() {
        // Mean of phi_hat, coordinatewise.
        let mut mean = vec![KahanSum::default(); p1];
        for rep in &successes {
            for (m, v) in mean.iter_mut().zip(&rep[ei].phi) {
                m.add(*v);
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m.value() / b as f64).collect();

        let mut sq_about_mean = KahanSum::default();
        let mut sq_about_truth = KahanSum::default();
        let mut bytes = KahanSum::default();
        let mut nanos = KahanSum::default();
        let mut fallbacks = 0usize;
        for rep in &successes {
            let o = &rep[ei];
            for j in 0..p1 {
                let dm = o.phi[j] - mean[j];
                let dt = o.phi[j] - phi_star[j];
                sq_about_mean.add(dm * dm);
                sq_about_truth.add(dt * dt);
            }
            bytes.add(o.bytes as f64);
            nanos.add(o.nanos as f64);
            fallbacks += o.fallback as usize;
        }
        let abs_bias = mean
            .iter()
            .zip(&phi_star)
            .map(|(m, t)| (m - t) * (m - t))
            .sum::<f64>()
            .sqrt();
        let sd = if b > 1 {
            (sq_about_mean.value() / (b - 1) as f64).sqrt()
        } else {
            0.0
        };
        let rmse = (sq_about_truth.value() / b as f64).sqrt();

        let mut intervals = Vec::with_capacity(cfg.alphas.len());
        for (ai, &alpha) in cfg.alphas.iter().enumerate() {
            let mut cov = KahanSum::default();
            let mut wid = KahanSum::default();
            let mut cov_n = 0usize;
            let mut wid_n = 0usize;
            for rep in &successes {
                if let Some(c) = rep[ei].covered[ai] {
                    cov.add(c as u8 as f64);
                    cov_n += 1;
                }
                if let Some(w) = rep[ei].widths[ai] {
                    wid.add(w);
                    wid_n += 1;
                }
            }
            intervals.push(IntervalMetrics {
                alpha,
                coverage: (cov_n > 0).then(|| cov.value() / cov_n as f64),
                mean_width: (wid_n > 0).then(|| wid.value() / wid_n as f64),
            });
        }

        estimators.push(EstimatorMetrics {
            kind,
            abs_bias,
            sd,
            rmse,
            mean_comm_bytes: bytes.value() / b as f64,
            fallback_rate: fallbacks as f64 / b as f64,
            intervals,
        });
        timing.push(EstimatorTiming {
            kind,
            mean_wall_ms: nanos.value() / b as f64 / 1e6,
        });
    }

    Ok(ExperimentReport {
        design: cfg.design.label().to_string(),
        k: cfg.design.k(),
        n_total: cfg.design.n_total(),
        p1,
        p2: cfg.design.p2(),
        replications: cfg.replications,
        seed: cfg.seed,
        phi_star,
        alphas: cfg.alphas.clone(),
        failures,
        estimators,
        timing: Some(timing),
    })
}
