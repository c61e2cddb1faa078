//! Gamma-family special functions backing the chi-square quantiles.
//!
//! Quantiles are found by Newton inversion of the regularized incomplete
//! gamma function, started from the Wilson-Hilferty cube-root approximation,
//! so no quantile tables or external distribution crates are needed.

/// Natural log of the gamma function (Lanczos, g = 5, n = 6).
pub fn ln_gamma(x: f64) -> f64 {
    // Reflection for the (unused in practice) x < 0.5 branch keeps the
    // function total on positive reals.
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    const COEFFS: [f64; 6] = [
        76.180_091_729_471_46,
        -86.505_320_329_416_77,
        24.014_098_240_830_91,
        -1.231_739_572_450_155,
        0.120_865_097_386_617_9e-2,
        -0.539_523_938_495_3e-5,
    ];
    let y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000_000_000_190_015;
    for (j, &c) in COEFFS.iter().enumerate() {
        ser += c / (y + 1.0 + j as f64);
    }
    -tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

/// Regularized lower incomplete gamma P(a, x) = γ(a, x) / Γ(a).
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_continued_fraction(a, x)
    }
}

// Series representation of P(a, x); converges fast for x < a + 1.
fn gamma_series(a: f64, x: f64) -> f64 {
    let eps = 1e-15;
    let mut sum = 1.0 / a;
    let mut term = sum;
    for n in 1..500 {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() < eps * sum.abs() {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

// Continued fraction for Q(a, x) = 1 - P(a, x); converges fast for x >= a + 1.
fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    let eps = 1e-15;
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < eps {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Chi-square CDF with `df` degrees of freedom.
pub fn chisq_cdf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    reg_lower_gamma(df as f64 / 2.0, x / 2.0)
}

/// Upper-`alpha` quantile of the chi-square distribution with `df` degrees
/// of freedom: the q with P(X > q) = alpha.
pub fn chisq_quantile(df: usize, alpha: f64) -> f64 {
    assert!(df >= 1, "degrees of freedom must be at least 1");
    assert!(
        alpha > 0.0 && alpha < 1.0,
        "alpha must lie strictly in (0, 1)"
    );
    let k = df as f64;
    let target = 1.0 - alpha;

    // Wilson-Hilferty start: X/k is approximately (1 - 2/(9k) + z sqrt(2/(9k)))^3.
    let z = standard_normal_quantile(target);
    let c = 2.0 / (9.0 * k);
    let mut q = k * (1.0 - c + z * c.sqrt()).powi(3);
    if !(q.is_finite() && q > 0.0) {
        q = k;
    }

    // Newton on F(q) - target with analytic density; bisection fallback
    // keeps the iterate inside (0, inf).
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..200 {
        let f = chisq_cdf(q, df) - target;
        if f > 0.0 {
            hi = q;
        } else {
            lo = q;
        }
        let pdf = chisq_pdf(q, k);
        let mut next = if pdf > 0.0 { q - f / pdf } else { q };
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * q.max(1.0)
            };
        }
        if (next - q).abs() <= 1e-12 * q.max(1.0) {
            q = next;
            break;
        }
        q = next;
    }
    q
}

fn chisq_pdf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let half_k = k / 2.0;
    ((half_k - 1.0) * x.ln() - x / 2.0 - half_k * std::f64::consts::LN_2 - ln_gamma(half_k)).exp()
}

// Acklam-style rational approximation, refined by one Halley step against
// the erfc-free CDF below; only used to seed the chi-square Newton solve.
fn standard_normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };
    x
}
