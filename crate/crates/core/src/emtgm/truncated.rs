//! Moments of a Gaussian truncated to a symmetric interval `[-v, v]`.

use super::special::{mills_ratio, normal_cdf, normal_pdf};

/// Masses below this are reported as underflowed.
pub const MIN_MASS: f64 = 1e-300;

/// Standardized distance beyond which the density is a point mass at the
/// nearest boundary; the error of the limit is below `1e-16` of the distance.
const SNAP_LIMIT: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedMoments {
    /// `φ = Φ((v-μ)/σ) - Φ((-v-μ)/σ)`.
    pub mass: f64,
    /// `⟨x⟩`.
    pub mean: f64,
    /// `⟨x²⟩`.
    pub second: f64,
    /// `⟨x²⟩ - ⟨x⟩²`, computed without subtracting the two.
    pub var: f64,
    /// True when the mass underflowed and the boundary limit was used.
    pub clamped: bool,
}

impl TruncatedMoments {
    /// `⟨(x - c)²⟩`.
    pub fn centered_second(&self, c: f64) -> f64 {
        self.var + (self.mean - c).powi(2)
    }
}

/// Moments of `N(μ, σ²)` restricted to `[-v, v]`.
///
/// In terms of the standardized limits `α = (-v-μ)/σ`, `β = (v-μ)/σ`:
/// `⟨x⟩ = μ - σ² (N(v|μ,σ²) - N(-v|μ,σ²)) / φ` and
/// `⟨x²⟩ = μ⟨x⟩ + σ² - σ² v (N(v|μ,σ²) + N(-v|μ,σ²)) / φ`.
/// The variance is evaluated in the equivalent form
/// `σ² [1 + (α p(α) - β p(β))/φ - ((p(α) - p(β))/φ)²]`.
pub fn truncated_moments(mu: f64, sigma2: f64, v: f64) -> TruncatedMoments {
    let sigma = sigma2.sqrt();
    let lo = (-v - mu) / sigma;
    let hi = (v - mu) / sigma;
    if sigma == 0.0 || lo > SNAP_LIMIT || hi < -SNAP_LIMIT {
        let edge = if sigma == 0.0 {
            mu.clamp(-v, v)
        } else if mu >= 0.0 {
            v
        } else {
            -v
        };
        return TruncatedMoments {
            mass: if sigma == 0.0 && mu.abs() <= v {
                1.0
            } else {
                0.0
            },
            mean: edge,
            second: edge * edge,
            var: 0.0,
            clamped: sigma != 0.0,
        };
    }
    // Densities at the limits divided by the mass. When the interval lies in
    // one tail, Mills ratios keep them finite after the mass underflows.
    let (mass, p_lo, p_hi) = if lo > 0.0 {
        let decay = (-0.5 * (hi - lo) * (hi + lo)).exp();
        let rel = mills_ratio(lo) - mills_ratio(hi) * decay;
        let p_lo = 1.0 / rel;
        (normal_pdf(lo) * rel, p_lo, p_lo * decay)
    } else if hi < 0.0 {
        let decay = (-0.5 * (lo - hi) * (lo + hi)).exp();
        let rel = mills_ratio(-hi) - mills_ratio(-lo) * decay;
        let p_hi = 1.0 / rel;
        (normal_pdf(hi) * rel, p_hi * decay, p_hi)
    } else {
        let mass = normal_cdf(hi) - normal_cdf(lo);
        (mass, normal_pdf(lo) / mass, normal_pdf(hi) / mass)
    };
    let shift = p_lo - p_hi;
    let mean = (mu + sigma * shift).clamp(-v, v);
    let lo_term = if lo.is_finite() { lo * p_lo } else { 0.0 };
    let hi_term = if hi.is_finite() { hi * p_hi } else { 0.0 };
    let ratio = 1.0 + lo_term - hi_term - shift * shift;
    // roundoff in the far tails can push the bracket outside (0, 1]
    let var = sigma2 * ratio.clamp(1e-30, 1.0);
    TruncatedMoments {
        mass,
        mean,
        second: var + mean * mean,
        var,
        clamped: !(mass >= MIN_MASS),
    }
}
