//! Variational EM with a truncated Gaussian mixture prior (EM-TGM-GAMP).
//!
//! Each coefficient `x_i` of the stacked time-domain signal gets a prior
//! mixing two Gaussians centered at `+v` and `-v`, both truncated to
//! `[-v, v]`, with Gamma-distributed precisions and a Bernoulli selector.
//! The E-step updates the factorized posteriors of `x`, the precisions and
//! the selectors against the GAMP likelihood surrogate; the M-step refits
//! the noise precision `β` and the boundary `v`.

pub mod special;
pub mod truncated;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gamp::{gamp_pass, GampState, VARIANCE_FLOOR};
use crate::linops::{norm2, norm_inf, LinearOperator, Rescaled};
use special::{digamma_unchecked, logistic, normal_cdf_minus_half};
pub use truncated::{truncated_moments, TruncatedMoments};

/// Lower clamp on `ln η`.
pub const LN_ETA_FLOOR: f64 = -700.0;

/// Entries with `| |x̂_i| - v | ≤ BOUNDARY_TOL · v` count as on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Gamma shape of the precision hyperprior.
    pub a: f64,
    /// Gamma rate of the precision hyperprior.
    pub b: f64,
    /// Prior probability of the `+v` component.
    pub pi: f64,
    /// Initial noise precision.
    pub beta0: f64,
    /// Initial boundary; `None` uses `‖y‖∞ / ‖A‖∞`.
    pub v0: Option<f64>,
    pub max_iters: usize,
    /// Stop once `‖y - A x̂‖ / ‖y‖` drops below this value.
    pub tol: Option<f64>,
    pub beta_max: f64,
    pub v_min: f64,
    pub variance_floor: f64,
    /// Refit the boundary every iteration; `false` keeps the initial value.
    pub learn_v: bool,
    /// Largest relative change of `v` per iteration; `None` leaves the
    /// least-squares step unbounded.
    pub max_v_step: Option<f64>,
    /// Run on `A·s` with `s` the typical magnitude of a solution, so the
    /// hyperprior acts on `x` of order one.
    pub normalize: bool,
    /// Scale every row of `A` (and `y`) to a common norm before solving.
    pub equilibrate_rows: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            a: 1e-6,
            b: 1e-6,
            pi: 0.5,
            beta0: 1e3,
            v0: None,
            max_iters: 200,
            tol: None,
            beta_max: 1e12,
            v_min: 1e-8,
            variance_floor: VARIANCE_FLOOR,
            learn_v: true,
            max_v_step: Some(0.3),
            normalize: true,
            equilibrate_rows: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {x}"
                )))
            }
        };
        positive("a", self.a)?;
        positive("b", self.b)?;
        positive("beta0", self.beta0)?;
        positive("beta_max", self.beta_max)?;
        positive("v_min", self.v_min)?;
        positive("variance_floor", self.variance_floor)?;
        if let Some(v) = self.v0 {
            positive("v0", v)?;
        }
        if let Some(t) = self.tol {
            positive("tol", t)?;
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::InvalidConfig(format!(
                "pi must lie in [0, 1], got {}",
                self.pi
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Factorized posterior state, one entry per coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriors {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub phi: Vec<f64>,
    pub ex: Vec<f64>,
    pub ex2: Vec<f64>,
    pub var: Vec<f64>,
    pub a1: Vec<f64>,
    pub b1: Vec<f64>,
    pub a2: Vec<f64>,
    pub b2: Vec<f64>,
    pub e_alpha1: Vec<f64>,
    pub e_alpha2: Vec<f64>,
    pub e_ln_alpha1: Vec<f64>,
    pub e_ln_alpha2: Vec<f64>,
    pub e_kappa: Vec<f64>,
    /// Number of coefficients whose truncated mass underflowed in the last
    /// `x` update.
    pub clamped: usize,
}

impl Posteriors {
    /// Zero means, unit variances and precisions, `⟨ln α⟩ = 0`, `⟨κ⟩ = ½`.
    pub fn init(n: usize, hp: &Hyperparams) -> Self {
        Posteriors {
            mu: vec![0.0; n],
            sigma2: vec![1.0; n],
            phi: vec![1.0; n],
            ex: vec![0.0; n],
            ex2: vec![1.0; n],
            var: vec![1.0; n],
            a1: vec![hp.a; n],
            b1: vec![hp.b; n],
            a2: vec![hp.a; n],
            b2: vec![hp.b; n],
            e_alpha1: vec![1.0; n],
            e_alpha2: vec![1.0; n],
            e_ln_alpha1: vec![0.0; n],
            e_ln_alpha2: vec![0.0; n],
            e_kappa: vec![0.5; n],
            clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ex.is_empty()
    }

    /// `⟨(x_i - v)²⟩`.
    pub fn dist_plus(&self, i: usize, v: f64) -> f64 {
        self.var[i] + (self.ex[i] - v).powi(2)
    }

    /// `⟨(x_i + v)²⟩`.
    pub fn dist_minus(&self, i: usize, v: f64) -> f64 {
        self.var[i] + (self.ex[i] + v).powi(2)
    }
}

/// Truncated-Gaussian update of `q(x)` from the GAMP surrogate.
pub fn update_qx(post: &mut Posteriors, gamp: &GampState, v: f64) -> Result<()> {
    check_len("posterior vs gamp", post.len(), gamp.cols())?;
    if !(v > 0.0) {
        return Err(Error::NonPositive {
            quantity: "v",
            index: 0,
            value: v,
        });
    }
    post.clamped = 0;
    for i in 0..post.len() {
        let k = post.e_kappa[i];
        let (a1, a2) = (post.e_alpha1[i], post.e_alpha2[i]);
        let tr = gamp.tau_r[i];
        let prec = k * a1 + (1.0 - k) * a2 + 1.0 / tr;
        let sigma2 = 1.0 / prec;
        let mu = ((k * a1 - (1.0 - k) * a2) * v + gamp.r_hat[i] / tr) * sigma2;
        let m = truncated_moments(mu, sigma2, v);
        post.mu[i] = mu;
        post.sigma2[i] = sigma2;
        post.phi[i] = m.mass;
        post.ex[i] = m.mean;
        post.ex2[i] = m.second;
        post.var[i] = m.var;
        post.clamped += m.clamped as usize;
    }
    Ok(())
}

/// Gamma updates of the two component precisions.
pub fn update_qalpha(post: &mut Posteriors, v: f64, a: f64, b: f64) {
    for i in 0..post.len() {
        let k = post.e_kappa[i];
        let a1 = a + 0.5 * k;
        let b1 = b + 0.5 * k * post.dist_plus(i, v);
        let a2 = a + 0.5 * (1.0 - k);
        let b2 = b + 0.5 * (1.0 - k) * post.dist_minus(i, v);
        post.a1[i] = a1;
        post.b1[i] = b1;
        post.a2[i] = a2;
        post.b2[i] = b2;
        post.e_alpha1[i] = a1 / b1;
        post.e_alpha2[i] = a2 / b2;
        post.e_ln_alpha1[i] = digamma_unchecked(a1) - b1.ln();
        post.e_ln_alpha2[i] = digamma_unchecked(a2) - b2.ln();
    }
}

/// `ln η` for a component with precision `alpha`: the log-mass that
/// `N(±v, 1/α)` puts on `[-v, v]`.
pub fn ln_eta(v: f64, alpha: f64) -> f64 {
    normal_cdf_minus_half(2.0 * v * alpha.sqrt())
        .ln()
        .max(LN_ETA_FLOOR)
}

/// Log-odds of `κ_i = 1` given the current moments.
pub fn kappa_logit(post: &Posteriors, i: usize, v: f64, pi: f64) -> f64 {
    let (a1, a2) = (post.e_alpha1[i], post.e_alpha2[i]);
    let quad = post.e_ln_alpha1[i] - post.e_ln_alpha2[i] - a1 * post.dist_plus(i, v)
        + a2 * post.dist_minus(i, v);
    0.5 * quad + ln_eta(v, a2) - ln_eta(v, a1) + (pi / (1.0 - pi)).ln()
}

/// Bernoulli update of the selectors.
pub fn update_qkappa(post: &mut Posteriors, v: f64, pi: f64) {
    for i in 0..post.len() {
        post.e_kappa[i] = if pi <= 0.0 {
            0.0
        } else if pi >= 1.0 {
            1.0
        } else {
            logistic(kappa_logit(post, i, v, pi))
        };
    }
}

/// `β = J / Σ_j ((y_j - û_j)² + τᵘ_j)`, capped at `beta_max`.
pub fn update_beta(y: &[f64], gamp: &GampState, beta_max: f64) -> Result<f64> {
    check_len("beta update", gamp.rows(), y.len())?;
    let denom: f64 = y
        .iter()
        .zip(&gamp.u_hat)
        .zip(&gamp.tau_u)
        .map(|((y, u), t)| (y - u).powi(2) + t)
        .sum();
    let beta = y.len() as f64 / denom;
    Ok(if beta.is_nan() || beta > beta_max {
        beta_max
    } else {
        beta
    })
}

/// Sign pattern used for the boundary update; zero maps to `+1`.
pub fn sign_pattern(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&x| if x >= 0.0 { 1.0 } else { -1.0 })
        .collect()
}

/// Result of a boundary update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryStep {
    pub v: f64,
    pub delta: f64,
    /// True when `Aγ = 0` and the update was skipped.
    pub skipped: bool,
}

/// Least-squares step of `v` along the sign pattern of `x_hat`.
///
/// `ax` must hold `A x̂`; the caller usually needs it for the residual too.
pub fn update_v<A: LinearOperator + ?Sized>(
    y: &[f64],
    op: &A,
    x_hat: &[f64],
    ax: &[f64],
    v: f64,
    v_min: f64,
) -> Result<BoundaryStep> {
    check_len("v update y", op.rows(), y.len())?;
    check_len("v update A x", op.rows(), ax.len())?;
    let ag = op.apply(&sign_pattern(x_hat))?;
    let energy: f64 = ag.iter().map(|g| g * g).sum();
    if energy == 0.0 {
        log::warn!("boundary update skipped: A·sign(x) is zero");
        return Ok(BoundaryStep {
            v,
            delta: 0.0,
            skipped: true,
        });
    }
    let cross: f64 = y
        .iter()
        .zip(ax)
        .zip(&ag)
        .map(|((y, a), g)| (y - a) * g)
        .sum();
    let delta = cross / energy;
    Ok(BoundaryStep {
        v: (v + delta).max(v_min),
        delta,
        skipped: false,
    })
}

/// Share of entries of `x` within `BOUNDARY_TOL · v` of `±v`.
pub fn boundary_fraction(x: &[f64], v: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let tol = BOUNDARY_TOL * v;
    x.iter().filter(|x| (x.abs() - v).abs() <= tol).count() as f64 / x.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub iteration: usize,
    /// `‖y - A x̂‖₂` after the E-step.
    pub residual: f64,
    /// Boundary after the M-step.
    pub v: f64,
    /// Noise precision after the M-step.
    pub beta: f64,
    /// Boundary fraction of `x̂` against the boundary used in the E-step.
    pub boundary_fraction: f64,
    /// Cumulative variance floor hits inside GAMP.
    pub clamp_events: usize,
    /// Coefficients whose truncated mass underflowed.
    pub clamped_moments: usize,
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub x: Vec<f64>,
    pub v: f64,
    /// Normalization factor; `posteriors` and `gamp` hold `x / scale`.
    pub scale: f64,
    pub beta: f64,
    pub iterations: usize,
    pub records: Vec<IterationRecord>,
    pub posteriors: Posteriors,
    /// GAMP state after the last pass.
    pub gamp: GampState,
    /// Whether every GAMP pass used exact squared products.
    pub exact_variances: bool,
    /// The selector update weights the quadratic terms by `⟨α⟩`.
    pub precision_weighted_kappa: bool,
    pub skipped_v_updates: usize,
}

impl SolveOutput {
    pub fn final_boundary_fraction(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.boundary_fraction)
    }
}

/// Runs the solver to `hp.max_iters` (or the optional tolerance).
pub fn solve<A: LinearOperator + ?Sized>(
    y: &[f64],
    op: &A,
    hp: &Hyperparams,
) -> Result<SolveOutput> {
    solve_with(y, op, hp, |_, _| {})
}

/// Typical entry magnitude of a solution of `A x = y`,
/// `‖y‖ √J / (‖A‖_F √I)`; falls back to 1 for degenerate inputs.
pub fn solution_scale<A: LinearOperator + ?Sized>(y: &[f64], op: &A) -> f64 {
    let s = norm2(y) * (op.rows() as f64).sqrt() / (op.frob_sq() * op.cols() as f64).sqrt();
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// `‖y - A x‖` in the caller's row scaling, from the weighted residual.
fn original_residual(y_w: &[f64], ax_w: &[f64], weights: Option<&[f64]>) -> f64 {
    let r = y_w.iter().zip(ax_w).map(|(y, a)| y - a);
    match weights {
        Some(w) => r.zip(w).map(|(r, w)| (r / w).powi(2)).sum::<f64>().sqrt(),
        None => r.map(|r| r * r).sum::<f64>().sqrt(),
    }
}

fn finite_or(quantity: &'static str, iteration: usize, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            quantity,
            iteration,
        })
    }
}

/// Like [`solve`], calling `observe(record, x̂)` after every iteration.
pub fn solve_with<A, F>(y: &[f64], op: &A, hp: &Hyperparams, mut observe: F) -> Result<SolveOutput>
where
    A: LinearOperator + ?Sized,
    F: FnMut(&IterationRecord, &[f64]),
{
    hp.validate()?;
    check_len("solver measurement", op.rows(), y.len())?;
    finite_or("y", 0, y)?;
    // initial boundary in the caller's units
    let v_start = match hp.v0 {
        Some(v) => v,
        None => {
            let a_inf = op.inf_norm();
            let y_inf = norm_inf(y);
            if a_inf > 0.0 && y_inf > 0.0 {
                y_inf / a_inf
            } else {
                1.0
            }
        }
    };
    let weights = if hp.equilibrate_rows {
        Some(Rescaled::equal_row_weights(op)?)
    } else {
        None
    };
    let unit = Rescaled::new(op, 1.0, weights)?;
    let y_orig = y;
    let y_w = unit.weigh_rows(y);
    let y = &y_w[..];
    let scale = if hp.normalize {
        solution_scale(y, &unit)
    } else {
        1.0
    };
    let op = &unit.with_factor(scale);
    let n = op.cols();
    let v_min = hp.v_min / scale;
    let mut beta = hp.beta0;
    let mut v = v_start / scale;
    let y_norm = norm2(y_orig);
    let mut post = Posteriors::init(n, hp);
    let mut state = GampState::new(op.rows(), n);
    state.variance_floor = hp.variance_floor;
    let mut records = Vec::with_capacity(hp.max_iters);
    let mut exact = true;
    let mut skipped = 0;
    let mut x_out = vec![0.0; n];

    for t in 1..=hp.max_iters {
        gamp_pass(op, &post.ex, &post.var, y, beta, &mut state)?;
        exact &= state.exact_variances;
        finite_or("r_hat", t, &state.r_hat)?;

        update_qx(&mut post, &state, v)?;
        finite_or("x_mean", t, &post.ex)?;
        update_qalpha(&mut post, v, hp.a, hp.b);
        update_qkappa(&mut post, v, hp.pi);
        finite_or("kappa", t, &post.e_kappa)?;

        beta = update_beta(y, &state, hp.beta_max)?;
        let ax = op.apply(&post.ex)?;
        let residual = original_residual(y, &ax, op.weights());
        let fraction = boundary_fraction(&post.ex, v);
        if hp.learn_v {
            let step = update_v(y, op, &post.ex, &ax, v, v_min)?;
            skipped += step.skipped as usize;
            v = match hp.max_v_step {
                Some(r) => step.v.clamp(v * (1.0 - r), v * (1.0 + r)).max(v_min),
                None => step.v,
            };
        }
        if !v.is_finite() {
            return Err(Error::NonFinite {
                quantity: "v",
                iteration: t,
            });
        }
        if !beta.is_finite() {
            return Err(Error::NonFinite {
                quantity: "beta",
                iteration: t,
            });
        }

        let record = IterationRecord {
            iteration: t,
            residual,
            v: v * scale,
            beta,
            boundary_fraction: fraction,
            clamp_events: state.clamp_events,
            clamped_moments: post.clamped,
        };
        log::trace!("iteration {t}: residual {residual:.3e}, v {v:.4e}, beta {beta:.3e}");
        for (o, x) in x_out.iter_mut().zip(&post.ex) {
            *o = x * scale;
        }
        observe(&record, &x_out);
        records.push(record);
        if let Some(tol) = hp.tol {
            if y_norm > 0.0 && residual / y_norm < tol {
                break;
            }
        }
    }
    for (o, x) in x_out.iter_mut().zip(&post.ex) {
        *o = x * scale;
    }
    Ok(SolveOutput {
        x: x_out,
        v: v * scale,
        scale,
        beta,
        iterations: records.len(),
        records,
        posteriors: post,
        gamp: state,
        exact_variances: exact,
        precision_weighted_kappa: true,
        skipped_v_updates: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::DenseMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fresh(n: usize) -> Posteriors {
        Posteriors::init(n, &Hyperparams::default())
    }

    #[test]
    fn alpha_update_arithmetic() {
        let mut p = fresh(1);
        p.e_kappa[0] = 1.0;
        // ⟨(x - v)²⟩ = 0.5 with v = 1: mean 1 - √0.5, no variance
        p.var[0] = 0.0;
        p.ex[0] = 1.0 - 0.5f64.sqrt();
        update_qalpha(&mut p, 1.0, 1e-6, 1e-6);
        let expect = (1e-6 + 0.5) / (1e-6 + 0.25);
        assert!((p.e_alpha1[0] - expect).abs() < 1e-12);
        assert!((p.e_alpha1[0] - 2.000004).abs() < 1e-5);
        // no evidence for the second component
        assert_eq!(p.e_alpha2[0], 1.0);
        assert_eq!(p.a2[0], 1e-6);
    }

    #[test]
    fn alpha_grows_when_mass_sits_on_boundary() {
        let mut p = fresh(1);
        p.e_kappa[0] = 1.0;
        p.var[0] = 0.0;
        p.ex[0] = 1.0;
        update_qalpha(&mut p, 1.0, 1e-6, 1e-6);
        assert!((p.e_alpha1[0] - (1e-6 + 0.5) / 1e-6).abs() < 1e-6);
        assert!(p.e_alpha1[0] > 5e5);
    }

    #[test]
    fn alpha_mean_matches_gamma_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = fresh(50);
        for i in 0..50 {
            p.e_kappa[i] = rng.random();
            p.ex[i] = rng.random_range(-1.0..1.0);
            p.var[i] = rng.random_range(0.0..0.3);
        }
        update_qalpha(&mut p, 1.0, 1e-6, 1e-6);
        for i in 0..50 {
            let k = p.e_kappa[i];
            let d = p.dist_plus(i, 1.0);
            let ratio = p.e_alpha1[i] * (1e-6 + 0.5 * k * d) / (1e-6 + 0.5 * k);
            assert!((ratio - 1.0).abs() < 1e-12);
            assert!(p.b1[i] > 0.0 && p.b2[i] > 0.0);
        }
    }

    #[test]
    fn symmetric_state_gives_half() {
        let mut p = fresh(3);
        update_qkappa(&mut p, 1.0, 0.5);
        assert!(p.e_kappa.iter().all(|k| (k - 0.5).abs() < 1e-15));
    }

    #[test]
    fn dominant_first_component() {
        let mut p = fresh(1);
        p.ex[0] = 0.999;
        p.var[0] = 1e-6;
        p.e_alpha1[0] = 1e4;
        p.e_ln_alpha1[0] = 1e4f64.ln();
        update_qkappa(&mut p, 1.0, 0.5);
        assert!(p.e_kappa[0] > 0.99);
        update_qkappa(&mut p, 1.0, 0.0);
        assert_eq!(p.e_kappa[0], 0.0);
        update_qkappa(&mut p, 1.0, 1.0);
        assert_eq!(p.e_kappa[0], 1.0);
    }

    #[test]
    fn ln_eta_is_floored() {
        assert!(ln_eta(1.0, 1.0) < 0.0);
        assert_eq!(ln_eta(1e-310, 1.0), LN_ETA_FLOOR);
        // α → ∞: the whole mass is inside, η → 1/2
        assert!((ln_eta(1.0, 1e8) - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn beta_update_examples() {
        let mut st = GampState::new(3, 1);
        st.u_hat = vec![1.0, 2.0, 3.0];
        st.tau_u = vec![1.0; 3];
        assert_eq!(update_beta(&[1.0, 2.0, 3.0], &st, 1e12).unwrap(), 1.0);
        st.u_hat = vec![0.0, 1.0, 2.0];
        st.tau_u = vec![0.0; 3];
        assert_eq!(update_beta(&[1.0, 2.0, 3.0], &st, 1e12).unwrap(), 1.0);
        st.u_hat = vec![1.0, 2.0, 3.0];
        assert_eq!(update_beta(&[1.0, 2.0, 3.0], &st, 1e12).unwrap(), 1e12);
    }

    #[test]
    fn v_update_examples() {
        let a = DenseMatrix::identity(4);
        let y = [2.5; 4];
        let x = [0.0; 4];
        let step = update_v(&y, &a, &x, &[0.0; 4], 0.1, 1e-8).unwrap();
        assert!((step.delta - 2.5).abs() < 1e-15);
        assert!((step.v - 2.6).abs() < 1e-15);
        let fitted = [1.0, -1.0, 1.0, -1.0];
        let step = update_v(&fitted, &a, &fitted, &fitted, 1.0, 1e-8).unwrap();
        assert_eq!(step.delta, 0.0);
        // v is floored
        let step = update_v(&[-5.0; 4], &a, &x, &[0.0; 4], 1.0, 1e-8).unwrap();
        assert_eq!(step.v, 1e-8);
    }

    #[test]
    fn v_update_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (r, c) = (6, 10);
        let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = DenseMatrix::new(r, c, data).unwrap();
        let y: Vec<f64> = (0..r).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let ax = a.apply(&x).unwrap();
        let step = update_v(&y, &a, &x, &ax, 10.0, 1e-8).unwrap();
        let g = sign_pattern(&x);
        let cost = |d: f64| {
            let z: Vec<f64> = x.iter().zip(&g).map(|(x, g)| x + g * d).collect();
            let az = a.apply(&z).unwrap();
            y.iter().zip(&az).map(|(y, a)| (y - a).powi(2)).sum::<f64>()
        };
        // coarse grid then a fine grid around the coarse minimum
        let coarse = (-4000..=4000)
            .map(|k| k as f64 * 1e-3)
            .min_by(|p, q| cost(*p).total_cmp(&cost(*q)))
            .unwrap();
        let fine = (-2000..=2000)
            .map(|k| coarse + k as f64 * 1e-6)
            .min_by(|p, q| cost(*p).total_cmp(&cost(*q)))
            .unwrap();
        assert!((fine - step.delta).abs() < 1e-6, "{fine} vs {}", step.delta);
    }

    #[test]
    fn degenerate_sign_direction_is_skipped() {
        let a = DenseMatrix::new(1, 2, vec![1.0, -1.0]).unwrap();
        let step = update_v(&[1.0], &a, &[0.5, 0.5], &[0.0], 0.7, 1e-8).unwrap();
        assert!(step.skipped);
        assert_eq!(step.v, 0.7);
    }

    #[test]
    fn boundary_fraction_counts_both_signs() {
        assert_eq!(boundary_fraction(&[1.0, -1.0, 0.9995, 0.5], 1.0), 0.75);
        assert_eq!(boundary_fraction(&[], 1.0), 0.0);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = Hyperparams {
            pi: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = Hyperparams {
            a: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = Hyperparams {
            max_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let parsed: Hyperparams = serde_json::from_str(r#"{"max_iters": 20}"#).unwrap();
        assert_eq!(parsed.max_iters, 20);
        assert!(serde_json::from_str::<Hyperparams>(r#"{"iters": 20}"#).is_err());
    }

    #[test]
    fn solver_keeps_means_inside_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (r, c) = (20, 60);
        let data: Vec<f64> = (0..r * c)
            .map(|_| rng.random_range(-1.0..1.0) / (r as f64).sqrt())
            .collect();
        let a = DenseMatrix::new(r, c, data).unwrap();
        let y: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hp = Hyperparams {
            max_iters: 60,
            v0: Some(0.5),
            ..Default::default()
        };
        let mut checked = 0;
        let mut v_prev = 0.5;
        let out = solve_with(&y, &a, &hp, |rec, x| {
            // x̂ lies inside the boundary used for that E-step
            assert!(x.iter().all(|x| x.abs() <= v_prev));
            v_prev = rec.v;
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, 60);
        assert_eq!(out.iterations, 60);
        assert!(out.v > 0.0 && out.beta > 0.0);
        let first = out.records[0].residual;
        let last = out.records.last().unwrap().residual;
        assert!(last < first);
    }

    #[test]
    fn solver_is_deterministic() {
        let a = DenseMatrix::new(2, 4, vec![1.0, 0.5, -0.3, 0.2, 0.1, -1.0, 0.4, 0.7]).unwrap();
        let y = [0.3, -0.8];
        let hp = Hyperparams {
            max_iters: 30,
            ..Default::default()
        };
        let p = solve(&y, &a, &hp).unwrap();
        let q = solve(&y, &a, &hp).unwrap();
        assert_eq!(p.x, q.x);
        assert_eq!(p.records, q.records);
    }

    fn random_system(seed: u64, r: usize, c: usize) -> (DenseMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        (DenseMatrix::new(r, c, data).unwrap(), y)
    }

    #[test]
    fn solution_scales_inversely_with_operator() {
        let (a, y) = random_system(8, 15, 45);
        let c = 1e-3;
        let scaled: Vec<f64> = a.as_slice().iter().map(|v| v * c).collect();
        let b = DenseMatrix::new(15, 45, scaled).unwrap();
        let hp = Hyperparams {
            max_iters: 40,
            ..Default::default()
        };
        let p = solve(&y, &a, &hp).unwrap();
        let q = solve(&y, &b, &hp).unwrap();
        for (x, z) in p.x.iter().zip(&q.x) {
            assert!((x - z * c).abs() < 1e-6 * p.v);
        }
        assert!((p.v - q.v * c).abs() < 1e-6 * p.v);
    }

    #[test]
    fn boundary_step_is_bounded() {
        let (a, y) = random_system(10, 15, 45);
        let hp = Hyperparams {
            max_iters: 30,
            v0: Some(1e-4),
            max_v_step: Some(0.1),
            ..Default::default()
        };
        let out = solve(&y, &a, &hp).unwrap();
        let mut prev = 1e-4;
        for r in &out.records {
            assert!(r.v <= prev * 1.1 * (1.0 + 1e-12) && r.v >= prev * 0.9 * (1.0 - 1e-12));
            prev = r.v;
        }
        let free = Hyperparams {
            max_v_step: None,
            ..hp
        };
        let out = solve(&y, &a, &free).unwrap();
        assert!(out.records[0].v > 1.1e-4);
    }

    #[test]
    fn tolerance_stops_early() {
        let a = DenseMatrix::identity(4);
        let y = [1.0, -1.0, 1.0, -1.0];
        let hp = Hyperparams {
            max_iters: 200,
            tol: Some(1e-3),
            ..Default::default()
        };
        let out = solve(&y, &a, &hp).unwrap();
        assert!(out.iterations < 200);
        assert!(out.records.last().unwrap().residual / 2.0 < 1e-3);
    }

    #[test]
    fn non_finite_measurement_is_rejected() {
        let a = DenseMatrix::identity(2);
        let err = solve(&[f64::NAN, 0.0], &a, &Hyperparams::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { quantity: "y", .. }));
    }
}
