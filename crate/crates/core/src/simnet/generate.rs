//! Seeded data generators for the two simulation designs. Every row is a
//! pure function of (seed, block id, row id), so generation is reproducible
//! under any scheduling.

use crate::asymptotics::EivScenario;
use crate::model::DataBlock;
use crate::rng::CounterRng;

use super::SimError;

const TAG_EIV: u64 = 0xE1F;
const TAG_LOGISTIC: u64 = 0x106;

/// Errors-in-variables data: Z ~ N(mu_z, sigma_z^2), X = Z + e,
/// Y = phi* + lambda_k Z + f with (e, f) iid N(0, sigma^2). Two blocks with
/// slopes (lambda1, lambda2).
pub fn generate_eiv(scn: &EivScenario, n_per_block: &[usize], seed: u64) -> Vec<DataBlock> {
    assert_eq!(
        n_per_block.len(),
        2,
        "the errors-in-variables design has two blocks"
    );
    let sigma = scn.sigma2.sqrt();
    let sigma_z = scn.sigma_z2.sqrt();
    let lambdas = [scn.lambda1, scn.lambda2];
    n_per_block
        .iter()
        .enumerate()
        .map(|(k, &nk)| {
            let lam = lambdas[k];
            let mut values = Vec::with_capacity(nk * 2);
            for i in 0..nk {
                let mut rng = CounterRng::from_parts(&[TAG_EIV, seed, k as u64, i as u64]);
                let z = rng.next_normal(scn.mu_z, sigma_z);
                let e = rng.next_normal(0.0, sigma);
                let f = rng.next_normal(0.0, sigma);
                values.push(z + e);
                values.push(scn.phi_star + lam * z + f);
            }
            DataBlock::new(k, 2, values).expect("generated rows are finite")
        })
        .collect()
}

/// Block-specific slopes of the logistic design:
/// lambda_{k,j} = (-1)^j 10 (1 - 2(k-1)/(K-1)) for j = 1..p2, k = 1..K.
pub fn logistic_lambda(k_index: usize, k_total: usize, p2: usize) -> Vec<f64> {
    assert!(k_total >= 2, "the slope formula divides by K - 1");
    let scale = 10.0 * (1.0 - 2.0 * k_index as f64 / (k_total as f64 - 1.0));
    (1..=p2)
        .map(|j| if j % 2 == 1 { -scale } else { scale })
        .collect()
}

/// Heterogeneous logistic design: X ~ N(0, 0.75^2 I_p) with p = 1 + p2 and
/// P(Y = 1 | X) = sigmoid(X^T theta_k*), theta_k* = (phi*, lambda_k*).
pub fn generate_logistic(
    k: usize,
    n: usize,
    p2: usize,
    phi_star: f64,
    seed: u64,
) -> Result<Vec<DataBlock>, SimError> {
    if k < 2 {
        return Err(SimError::InvalidConfig {
            detail: "logistic design needs K >= 2: the block slope formula is undefined at K = 1"
                .into(),
        });
    }
    let thetas: Vec<Vec<f64>> = (0..k)
        .map(|ki| {
            let mut t = vec![phi_star];
            t.extend(logistic_lambda(ki, k, p2));
            t
        })
        .collect();
    Ok(generate_logistic_with(&thetas, n, seed))
}

/// Logistic blocks with explicitly given per-block parameters (used for the
/// homogeneous testbed, where every block shares one theta).
pub fn generate_logistic_with(thetas: &[Vec<f64>], n: usize, seed: u64) -> Vec<DataBlock> {
    let p = thetas[0].len();
    thetas
        .iter()
        .enumerate()
        .map(|(k, theta)| {
            assert_eq!(theta.len(), p, "blocks must share the parameter dimension");
            let mut values = Vec::with_capacity(n * (p + 1));
            for i in 0..n {
                let mut rng = CounterRng::from_parts(&[TAG_LOGISTIC, seed, k as u64, i as u64]);
                let mut z = 0.0;
                for t in theta {
                    let x = rng.next_normal(0.0, 0.75);
                    values.push(x);
                    z += x * t;
                }
                let prob = 1.0 / (1.0 + (-z).exp());
                values.push(if rng.next_bernoulli(prob) { 1.0 } else { 0.0 });
            }
            DataBlock::new(k, p + 1, values).expect("generated rows are finite")
        })
        .collect()
}
