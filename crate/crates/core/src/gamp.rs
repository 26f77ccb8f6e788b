//! Single-pass GAMP likelihood approximation for a Gaussian output channel.
//!
//! One call runs the first three GAMP steps: from the current posterior
//! means and variances of `x` and the noise precision `β` it produces
//! per-coefficient Gaussian likelihoods `N(x_i | r̂_i, τʳ_i)` and the
//! posterior of the noiseless output `u = Ax`. The Onsager state `ŝ` is
//! carried between calls and only zeroed once, on construction.

use crate::error::{check_len, Error, Result};
use crate::linops::{Direction, LinearOperator};

/// Default lower clamp for `τᵖ` and `τʳ`.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GampState {
    pub s_hat: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub tau_p: Vec<f64>,
    pub tau_s: Vec<f64>,
    pub r_hat: Vec<f64>,
    pub tau_r: Vec<f64>,
    pub u_hat: Vec<f64>,
    pub tau_u: Vec<f64>,
    pub variance_floor: f64,
    /// Number of `τᵖ`/`τʳ` entries raised to the floor, cumulative.
    pub clamp_events: usize,
    /// Whether the last pass used exact squared products.
    pub exact_variances: bool,
}

impl GampState {
    pub fn new(rows: usize, cols: usize) -> Self {
        GampState {
            s_hat: vec![0.0; rows],
            p_hat: vec![0.0; rows],
            tau_p: vec![0.0; rows],
            tau_s: vec![0.0; rows],
            r_hat: vec![0.0; cols],
            tau_r: vec![0.0; cols],
            u_hat: vec![0.0; rows],
            tau_u: vec![0.0; rows],
            variance_floor: VARIANCE_FLOOR,
            clamp_events: 0,
            exact_variances: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.s_hat.len()
    }

    pub fn cols(&self) -> usize {
        self.r_hat.len()
    }
}

fn reject_bad(quantity: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !(*x >= 0.0) || !x.is_finite()) {
        Some(index) => Err(Error::NonPositive {
            quantity,
            index,
            value: v[index],
        }),
        None => Ok(()),
    }
}

/// One pass of the likelihood approximation, updating `state` in place.
///
/// Zero variances in `tau_x` are allowed (fully concentrated posteriors);
/// the floor on `τᵖ` keeps the output channel well defined.
pub fn gamp_pass<A: LinearOperator + ?Sized>(
    op: &A,
    x_hat: &[f64],
    tau_x: &[f64],
    y: &[f64],
    beta: f64,
    state: &mut GampState,
) -> Result<()> {
    let (rows, cols) = (op.rows(), op.cols());
    check_len("gamp x_hat", cols, x_hat.len())?;
    check_len("gamp tau_x", cols, tau_x.len())?;
    check_len("gamp y", rows, y.len())?;
    check_len("gamp state rows", rows, state.rows())?;
    check_len("gamp state cols", cols, state.cols())?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::NonPositive {
            quantity: "beta",
            index: 0,
            value: beta,
        });
    }
    reject_bad("tau_x", tau_x)?;
    let floor = state.variance_floor;

    // step 1: output-side prediction
    let sq = op.apply_squared(tau_x, Direction::Forward)?;
    state.exact_variances = sq.exact;
    let mut tau_p = sq.values;
    reject_bad("tau_p", &tau_p)?;
    for t in tau_p.iter_mut() {
        if *t < floor {
            *t = floor;
            state.clamp_events += 1;
        }
    }
    let ax = op.apply(x_hat)?;
    for j in 0..rows {
        state.p_hat[j] = ax[j] - tau_p[j] * state.s_hat[j];
    }

    // step 2: Gaussian output channel y = u + N(0, 1/β)
    for j in 0..rows {
        let tp = tau_p[j];
        let p = state.p_hat[j];
        let denom = tp * beta + 1.0;
        let tu = tp / denom;
        state.tau_u[j] = tu;
        state.u_hat[j] = tu * (y[j] * beta + p / tp);
        // (û - p̂)/τᵖ and (1/τᵖ)(1 - τᵘ/τᵖ), written without cancellation
        state.s_hat[j] = beta * (y[j] - p) / denom;
        state.tau_s[j] = beta / denom;
    }
    state.tau_p = tau_p;
    reject_bad("tau_s", &state.tau_s)?;

    // step 3: input-side likelihoods
    let sq = op.apply_squared(&state.tau_s, Direction::Adjoint)?;
    state.exact_variances &= sq.exact;
    let back = op.apply_adjoint(&state.s_hat)?;
    for i in 0..cols {
        let mut tr = 1.0 / sq.values[i];
        if !(tr >= floor) {
            if tr.is_nan() {
                return Err(Error::NonPositive {
                    quantity: "tau_r",
                    index: i,
                    value: tr,
                });
            }
            tr = floor;
            state.clamp_events += 1;
        }
        state.tau_r[i] = tr;
        state.r_hat[i] = x_hat[i] + tr * back[i];
    }
    Ok(())
}

/// Posterior of `x_i` under the likelihood `N(x_i | r̂_i, τʳ_i)` and an
/// untruncated zero-mean Gaussian prior with variance `prior_var`.
pub fn gaussian_posterior(r_hat: f64, tau_r: f64, prior_var: f64) -> (f64, f64) {
    let w = prior_var / (prior_var + tau_r);
    (w * r_hat, w * tau_r)
}
