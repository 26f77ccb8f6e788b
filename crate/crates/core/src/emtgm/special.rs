//! Normal density/cdf, log-gamma and digamma.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `N(x | mean, var)`.
pub fn gaussian_density(x: f64, mean: f64, var: f64) -> f64 {
    let z = (x - mean) / var.sqrt();
    normal_pdf(z) / var.sqrt()
}

/// Standard normal cdf through the complementary error function, so the
/// lower tail keeps full relative precision.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Mills ratio `(1 - Φ(x)) / N(x|0,1)` for `x >= 0`. Finite where both
/// terms underflow.
pub fn mills_ratio(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 25.0 {
        return normal_cdf(-x) / normal_pdf(x);
    }
    // Laplace continued fraction 1/(x+1/(x+2/(x+3/(x+...)))), evaluated bottom-up
    let mut tail = x;
    for k in (1..=40).rev() {
        tail = x + k as f64 / tail;
    }
    1.0 / tail
}

/// `Φ(x) - 1/2 = erf(x/√2)/2`, accurate near zero.
pub fn normal_cdf_minus_half(x: f64) -> f64 {
    0.5 * libm::erf(x * FRAC_1_SQRT_2)
}

pub fn log_gamma(a: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "log_gamma needs a > 0, got {a}"
        )));
    }
    Ok(libm::lgamma(a))
}

/// Digamma `ψ(a) = d/da ln Γ(a)` for `a > 0`.
///
/// Shifts the argument above 10 with `ψ(a) = ψ(a+1) - 1/a`, then sums the
/// asymptotic series.
pub fn digamma(a: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "digamma needs a > 0, got {a}"
        )));
    }
    Ok(digamma_unchecked(a))
}

pub(crate) fn digamma_unchecked(mut a: f64) -> f64 {
    let mut shift = 0.0;
    while a < 10.0 {
        shift -= 1.0 / a;
        a += 1.0;
    }
    let inv = 1.0 / a;
    let inv2 = inv * inv;
    // Bernoulli terms B_{2k} / (2k) for k = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    shift + a.ln() - 0.5 * inv - series
}

/// Numerically stable logistic function.
pub fn logistic(c: f64) -> f64 {
    if c >= 0.0 {
        1.0 / (1.0 + (-c).exp())
    } else {
        let e = c.exp();
        e / (1.0 + e)
    }
}
