//! Built-in block models: heterogeneous logistic regression, the
//! errors-in-variables model, and the two closed-form test models used by
//! the solver and bias oracles.

use nalgebra::DVector;

use super::{BlockModel, DataBlock};

/// Numerically stable sigmoid.
#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
#[inline]
fn log1p_exp(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic regression with logit x^T theta.
///
/// A data row is (x_1, ..., x_p, y) with y in {0, 1}; the first p1 features
/// multiply the common parameter phi.
#[derive(Debug, Clone)]
pub struct Logistic {
    p1: usize,
    p2: usize,
}

impl Logistic {
    pub fn new(p1: usize, p2: usize) -> Self {
        assert!(p1 >= 1);
        Logistic { p1, p2 }
    }
}

impl BlockModel for Logistic {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn p1(&self) -> usize {
        self.p1
    }

    fn p2(&self) -> usize {
        self.p2
    }

    fn row_len(&self) -> usize {
        self.p1 + self.p2 + 1
    }

    fn objective(&self, row: &[f64], theta: &[f64]) -> f64 {
        let p = theta.len();
        let y = row[p];
        let z: f64 = row[..p].iter().zip(theta).map(|(x, t)| x * t).sum();
        log1p_exp(z) - y * z
    }

    fn score_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let p = theta.len();
        let y = row[p];
        let z: f64 = row[..p].iter().zip(theta).map(|(x, t)| x * t).sum();
        let g = sigmoid(z) - y;
        for (o, x) in out.iter_mut().zip(&row[..p]) {
            *o = g * x;
        }
    }

    fn hessian_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let p = theta.len();
        let z: f64 = row[..p].iter().zip(theta).map(|(x, t)| x * t).sum();
        let s = sigmoid(z);
        let w = s * (1.0 - s);
        for j in 0..p {
            for l in 0..p {
                out[j * p + l] = w * row[l] * row[j];
            }
        }
    }

    fn third_derivative_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let p = theta.len();
        let z: f64 = row[..p].iter().zip(theta).map(|(x, t)| x * t).sum();
        let s = sigmoid(z);
        let w3 = s * (1.0 - s) * (1.0 - 2.0 * s);
        for j in 0..p {
            for m in 0..p {
                let c = (j * p + m) * p;
                let xjm = w3 * row[j] * row[m];
                for l in 0..p {
                    out[c + l] = xjm * row[l];
                }
            }
        }
    }

    fn score_hessian_into(
        &self,
        row: &[f64],
        theta: &[f64],
        score_out: &mut [f64],
        hessian_out: &mut [f64],
    ) {
        let p = theta.len();
        let y = row[p];
        let z: f64 = row[..p].iter().zip(theta).map(|(x, t)| x * t).sum();
        let s = sigmoid(z);
        let g = s - y;
        let w = s * (1.0 - s);
        for j in 0..p {
            score_out[j] = g * row[j];
            let wj = w * row[j];
            for l in 0..p {
                hessian_out[j * p + l] = wj * row[l];
            }
        }
    }
}

/// Errors-in-variables M-function with known noise variance sigma^2:
/// M = (lambda X - (Y - phi))^2 / (2 sigma^2 (1 + lambda^2)).
///
/// A data row is (X, Y); theta = (phi, lambda). Not jointly convex, so fits
/// start from moment-based values.
#[derive(Debug, Clone)]
pub struct ErrorsInVariables {
    sigma2: f64,
}

impl ErrorsInVariables {
    pub fn new(sigma2: f64) -> Self {
        assert!(sigma2 > 0.0);
        ErrorsInVariables { sigma2 }
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

impl BlockModel for ErrorsInVariables {
    fn name(&self) -> &'static str {
        "eiv"
    }

    fn p1(&self) -> usize {
        1
    }

    fn p2(&self) -> usize {
        1
    }

    fn row_len(&self) -> usize {
        2
    }

    fn objective(&self, row: &[f64], theta: &[f64]) -> f64 {
        let (x, y) = (row[0], row[1]);
        let (phi, lam) = (theta[0], theta[1]);
        let r = phi + lam * x - y;
        r * r / (2.0 * self.sigma2 * (1.0 + lam * lam))
    }

    fn score_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (x, y) = (row[0], row[1]);
        let (phi, lam) = (theta[0], theta[1]);
        let r = phi + lam * x - y;
        let a = 1.0 / (1.0 + lam * lam);
        out[0] = r * a / self.sigma2;
        out[1] = a * (r * x - lam * a * r * r) / self.sigma2;
    }

    fn hessian_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (x, y) = (row[0], row[1]);
        let (phi, lam) = (theta[0], theta[1]);
        let r = phi + lam * x - y;
        let a = 1.0 / (1.0 + lam * lam);
        let da = -2.0 * lam * a * a;
        let d2a = -2.0 * a * a + 8.0 * lam * lam * a * a * a;
        let s2 = self.sigma2;
        let m_pp = a / s2;
        let m_pl = (x * a + r * da) / s2;
        let m_ll = (x * x * a + 2.0 * r * x * da + 0.5 * r * r * d2a) / s2;
        out[0] = m_pp;
        out[1] = m_pl;
        out[2] = m_pl;
        out[3] = m_ll;
    }

    fn third_derivative_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (x, y) = (row[0], row[1]);
        let (phi, lam) = (theta[0], theta[1]);
        let r = phi + lam * x - y;
        let a = 1.0 / (1.0 + lam * lam);
        let da = -2.0 * lam * a * a;
        let d2a = -2.0 * a * a + 8.0 * lam * lam * a * a * a;
        let d3a = 24.0 * lam * a * a * a - 48.0 * lam * lam * lam * a * a * a * a;
        let s2 = self.sigma2;
        let m_ppp = 0.0;
        let m_ppl = da / s2;
        let m_pll = (2.0 * x * da + r * d2a) / s2;
        let m_lll = (3.0 * x * x * da + 3.0 * r * x * d2a + 0.5 * r * r * d3a) / s2;
        // Symmetric tensor over indices in {phi=0, lambda=1}; layout
        // out[(j*2 + m)*2 + l].
        for j in 0..2usize {
            for m in 0..2usize {
                for l in 0..2usize {
                    out[(j * 2 + m) * 2 + l] = match j + m + l {
                        0 => m_ppp,
                        1 => m_ppl,
                        2 => m_pll,
                        _ => m_lll,
                    };
                }
            }
        }
    }

    fn score_hessian_into(
        &self,
        row: &[f64],
        theta: &[f64],
        score_out: &mut [f64],
        hessian_out: &mut [f64],
    ) {
        let (x, y) = (row[0], row[1]);
        let (phi, lam) = (theta[0], theta[1]);
        let r = phi + lam * x - y;
        let a = 1.0 / (1.0 + lam * lam);
        let da = -2.0 * lam * a * a;
        let d2a = -2.0 * a * a + 8.0 * lam * lam * a * a * a;
        let s2 = self.sigma2;
        score_out[0] = r * a / s2;
        score_out[1] = a * (r * x - lam * a * r * r) / s2;
        let m_pl = (x * a + r * da) / s2;
        hessian_out[0] = a / s2;
        hessian_out[1] = m_pl;
        hessian_out[2] = m_pl;
        hessian_out[3] = (x * x * a + 2.0 * r * x * da + 0.5 * r * r * d2a) / s2;
    }

    /// Moment-based start: lambda from the slope of Y on X, phi from the
    /// residual mean. Consistent enough to land Newton in the right basin.
    fn initial_point(&self, block: &DataBlock) -> DVector<f64> {
        let n = block.n() as f64;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for row in block.rows() {
            sx += row[0];
            sy += row[1];
            sxx += row[0] * row[0];
            sxy += row[0] * row[1];
        }
        let mx = sx / n;
        let my = sy / n;
        let var_x = sxx / n - mx * mx;
        let cov = sxy / n - mx * my;
        let lam0 = if var_x > 1e-12 { cov / var_x } else { 0.0 };
        DVector::from_column_slice(&[my - lam0 * mx, lam0])
    }
}

/// Quadratic test model M = ||theta - x||^2 / 2 with identity Hessian.
#[derive(Debug, Clone)]
pub struct Quadratic {
    p1: usize,
    p2: usize,
}

impl Quadratic {
    pub fn new(p1: usize, p2: usize) -> Self {
        assert!(p1 >= 1);
        Quadratic { p1, p2 }
    }
}

impl BlockModel for Quadratic {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn p1(&self) -> usize {
        self.p1
    }

    fn p2(&self) -> usize {
        self.p2
    }

    fn row_len(&self) -> usize {
        self.p1 + self.p2
    }

    fn objective(&self, row: &[f64], theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(row)
            .map(|(t, x)| (t - x) * (t - x))
            .sum::<f64>()
            / 2.0
    }

    fn score_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        for ((o, t), x) in out.iter_mut().zip(theta).zip(row) {
            *o = t - x;
        }
    }

    fn hessian_into(&self, _row: &[f64], theta: &[f64], out: &mut [f64]) {
        let p = theta.len();
        out.fill(0.0);
        for j in 0..p {
            out[j * p + j] = 1.0;
        }
    }

    fn third_derivative_into(&self, _row: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Exponential-rate test model M = lambda x - log(lambda) for x > 0, whose
/// MLE is 1/mean(x) and whose leading-order bias is lambda/n. Used as the
/// closed-form oracle for the bias machinery.
#[derive(Debug, Clone)]
pub struct ExponentialMle;

impl BlockModel for ExponentialMle {
    fn name(&self) -> &'static str {
        "exponential"
    }

    fn p1(&self) -> usize {
        1
    }

    fn p2(&self) -> usize {
        0
    }

    fn row_len(&self) -> usize {
        1
    }

    fn objective(&self, row: &[f64], theta: &[f64]) -> f64 {
        let lam = theta[0];
        if lam <= 0.0 {
            return f64::INFINITY;
        }
        lam * row[0] - lam.ln()
    }

    fn score_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = row[0] - 1.0 / theta[0];
    }

    fn hessian_into(&self, _row: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = 1.0 / (theta[0] * theta[0]);
    }

    fn third_derivative_into(&self, _row: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = -2.0 / (theta[0] * theta[0] * theta[0]);
    }

    fn initial_point(&self, block: &DataBlock) -> DVector<f64> {
        let mean = block.rows().map(|r| r[0]).sum::<f64>() / block.n() as f64;
        DVector::from_element(1, 1.0 / mean.max(1e-12))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checks::*;
    use crate::model::{hessian, score, third_derivative, ParameterBox};
    use crate::rng::CounterRng;

    #[test]
    fn logistic_objective_at_zero_is_log2() {
        let m = Logistic::new(1, 0);
        let v = m.objective(&[0.0, 1.0], &[0.0]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logistic_objective_matches_direct_evaluation() {
        // x = 0.5, theta chosen so that x^T theta = 2.
        let m = Logistic::new(1, 0);
        let v = m.objective(&[0.5, 0.0], &[4.0]);
        assert!((v - (1.0 + 2.0f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn logistic_score_at_zero() {
        let m = Logistic::new(1, 1);
        for &y in &[0.0, 1.0] {
            let s = score(&m, &[0.7, -0.3, y], &[0.0, 0.0]);
            assert!((s[0] - (0.5 - y) * 0.7).abs() < 1e-15);
            assert!((s[1] - (0.5 - y) * (-0.3)).abs() < 1e-15);
        }
    }

    #[test]
    fn logistic_stable_objective_matches_naive_form() {
        let m = Logistic::new(1, 1);
        let mut rng = CounterRng::from_parts(&[1]);
        for _ in 0..200 {
            let x = [rng.next_normal(0.0, 3.0), rng.next_normal(0.0, 3.0)];
            let y = if rng.next_bernoulli(0.5) { 1.0 } else { 0.0 };
            let th = [rng.next_normal(0.0, 3.0), rng.next_normal(0.0, 3.0)];
            let z = x[0] * th[0] + x[1] * th[1];
            let naive = y * (1.0 + (-z).exp()).ln() + (1.0 - y) * (1.0 + z.exp()).ln();
            if naive.is_finite() {
                let stable = m.objective(&[x[0], x[1], y], &th);
                assert!((stable - naive).abs() <= 1e-12 * (1.0 + naive.abs()));
            }
        }
    }

    #[test]
    fn logistic_survives_extreme_logits() {
        let m = Logistic::new(1, 0);
        let v = m.objective(&[1.0, 0.0], &[800.0]);
        assert!(v.is_finite());
        assert!((v - 800.0).abs() < 1e-9);
        let s = score(&m, &[1.0, 0.0], &[800.0]);
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eiv_objective_examples() {
        let m = ErrorsInVariables::new(1.0);
        // Residual zero: theta = (1, 1), row (0, 1) -> lambda*0 - (1 - 1) = 0.
        assert_eq!(m.objective(&[0.0, 1.0], &[1.0, 1.0]), 0.0);
        // Hessian phi-phi entry is 1 / (sigma^2 (1 + lambda^2)).
        let h = hessian(&m, &[0.3, -0.4], &[0.2, 2.0]);
        assert!((h[(0, 0)] - 1.0 / 5.0).abs() < 1e-14);
    }

    #[test]
    fn quadratic_derivatives_are_exact() {
        let m = Quadratic::new(2, 1);
        let s = score(&m, &[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]);
        assert_eq!(s.as_slice(), &[-1.0, -2.0, -3.0]);
        let h = hessian(&m, &[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]);
        assert!(h.is_identity(0.0));
        let t = third_derivative(&m, &[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]);
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exponential_third_derivative_closed_form() {
        let m = ExponentialMle;
        let t = third_derivative(&m, &[0.4], &[2.0]);
        assert!((t[(0, 0)] - (-2.0 / 8.0)).abs() < 1e-15);
    }

    fn random_row(model_name: &str, rng: &mut CounterRng, d: usize) -> Vec<f64> {
        let mut row: Vec<f64> = (0..d).map(|_| rng.next_normal(0.0, 1.0)).collect();
        match model_name {
            "logistic" => {
                let last = row.len() - 1;
                row[last] = if rng.next_bernoulli(0.5) { 1.0 } else { 0.0 };
            }
            "exponential" => row[0] = rng.next_f64() + 0.05,
            _ => {}
        }
        row
    }

    /// Derivative-chain consistency over 100 random draws per model.
    #[test]
    fn derivative_chain_consistency() {
        let models: Vec<(Box<dyn BlockModel>, ParameterBox)> = vec![
            (
                Box::new(Logistic::new(1, 2)),
                ParameterBox::symmetric(3, 1, 4.0),
            ),
            (
                Box::new(ErrorsInVariables::new(1.0)),
                ParameterBox::symmetric(2, 1, 4.0),
            ),
            (
                Box::new(Quadratic::new(1, 1)),
                ParameterBox::symmetric(2, 1, 4.0),
            ),
            (
                Box::new(ExponentialMle),
                ParameterBox::new(vec![0.2], vec![6.0], 1).unwrap(),
            ),
        ];
        for (model, pbox) in &models {
            let mut rng = CounterRng::from_parts(&[99, model.p() as u64, model.row_len() as u64]);
            for _ in 0..100 {
                let theta = pbox.sample_interior(&mut rng);
                let row = random_row(model.name(), &mut rng, model.row_len());
                check_score(model.as_ref(), &row, &theta, 1e-5).unwrap();
                check_hessian(model.as_ref(), &row, &theta, 1e-5).unwrap();
                check_third(model.as_ref(), &row, &theta, 1e-5).unwrap();
            }
        }
    }

    #[test]
    fn kronecker_contraction_matches_directional_second_difference() {
        let m = Logistic::new(1, 2);
        let mut rng = CounterRng::from_parts(&[7]);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..3).map(|_| rng.next_normal(0.0, 1.0)).collect();
            let u: Vec<f64> = (0..3).map(|_| rng.next_normal(0.0, 1.0)).collect();
            let row = random_row("logistic", &mut rng, 4);
            check_kronecker_contraction(&m, &row, &theta, &u, 1e-4).unwrap();
        }
        let e = ErrorsInVariables::new(0.5);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..2).map(|_| rng.next_normal(0.0, 1.0)).collect();
            let u: Vec<f64> = (0..2).map(|_| rng.next_normal(0.0, 1.0)).collect();
            let row = random_row("eiv", &mut rng, 2);
            check_kronecker_contraction(&e, &row, &theta, &u, 1e-4).unwrap();
        }
    }

    /// A model relying on the default finite-difference third derivative
    /// agrees with the analytic tensor of the model it wraps.
    #[test]
    fn fd_fallback_matches_analytic_third() {
        struct NoThird(Logistic);
        impl BlockModel for NoThird {
            fn name(&self) -> &'static str {
                "logistic-fd"
            }
            fn p1(&self) -> usize {
                self.0.p1()
            }
            fn p2(&self) -> usize {
                self.0.p2()
            }
            fn row_len(&self) -> usize {
                self.0.row_len()
            }
            fn objective(&self, row: &[f64], theta: &[f64]) -> f64 {
                self.0.objective(row, theta)
            }
            fn score_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
                self.0.score_into(row, theta, out)
            }
            fn hessian_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
                self.0.hessian_into(row, theta, out)
            }
        }
        let inner = Logistic::new(1, 1);
        let wrapped = NoThird(Logistic::new(1, 1));
        let row = [0.8, -0.5, 1.0];
        let theta = [0.4, -1.2];
        let exact = third_derivative(&inner, &row, &theta);
        let fd = third_derivative(&wrapped, &row, &theta);
        for (a, b) in exact.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-5);
        }
    }

    #[test]
    fn eiv_moment_start_recovers_slope_without_noise() {
        // Y = 2 + 3X exactly: slope start reproduces (2, 3).
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let x = i as f64 / 5.0;
                vec![x, 2.0 + 3.0 * x]
            })
            .collect();
        let block = DataBlock::from_rows(0, &rows).unwrap();
        let m = ErrorsInVariables::new(1.0);
        let start = m.initial_point(&block);
        assert!((start[0] - 2.0).abs() < 1e-10);
        assert!((start[1] - 3.0).abs() < 1e-10);
    }
}
