//! Scratch pilot for calibrating experiment scales; not part of the suite.

use dmest::aggregate::EstimatorKind;
use dmest::simnet::{monte_carlo, DesignConfig, ExperimentConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let k: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let b: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let n_total: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200_000);
    let n = n_total / k;
    eprintln!("K={k} n={n} B={b}");

    let design = DesignConfig::Logistic {
        k,
        n,
        p2: 4,
        phi_star: 1.0,
    };
    let mut cfg = ExperimentConfig::new(
        design,
        vec![
            EstimatorKind::Sac,
            EstimatorKind::Wd,
            EstimatorKind::DSac,
            EstimatorKind::DWd,
        ],
        b,
    );
    cfg.seed = 20260809;
    cfg.alphas = vec![0.05];
    let t0 = std::time::Instant::now();
    let report = monte_carlo(&cfg).unwrap();
    eprintln!("wall: {:.1}s, failures: {}", t0.elapsed().as_secs_f64(), report.failures);
    for e in &report.estimators {
        let iv = &e.intervals[0];
        println!(
            "{:6} bias={:.5e} sd={:.5e} rmse={:.5e} cov={:?} width={:?} fb={:.3}",
            e.kind.to_string(),
            e.abs_bias,
            e.sd,
            e.rmse,
            iv.coverage,
            iv.mean_width,
            e.fallback_rate
        );
    }
    if let Some(t) = &report.timing {
        for x in t {
            eprintln!("{:6} {:.1} ms", x.kind.to_string(), x.mean_wall_ms);
        }
    }
}
