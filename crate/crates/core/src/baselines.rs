//! Comparison schemes: zero-forcing precoding, ZF followed by amplitude
//! clipping, and FITRA, an accelerated proximal-gradient solver for
//! `min λ‖x‖_∞ + ‖y - Ax‖₂²`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::FreqChannel;
use crate::error::{check_len, Error, Result};
use crate::linops::{dot, norm2, norm_inf, LinearOperator};
use crate::model::{PrecodedFrame, SymbolFrame, SystemConfig, TimeFrame};

/// Default clipping threshold, in multiples of the per-dimension RMS.
pub const DEFAULT_CLIP_RATIO: f64 = 1.5;

/// `w_n = H_n^H (H_n H_n^H)^{-1} s_n` on data tones, zero on guard tones.
pub fn zf_precode(
    channel: &FreqChannel,
    symbols: &SymbolFrame,
    cfg: &SystemConfig,
) -> Result<PrecodedFrame> {
    check_len("channel tones", cfg.tones, channel.num_tones())?;
    check_len("symbol tones", cfg.tones, symbols.tones())?;
    check_len("symbol users", cfg.users, symbols.users())?;
    let mut w = PrecodedFrame::zeros(cfg.tones, cfg.antennas);
    for &n in &cfg.data_tones {
        let h = channel.tone(n);
        let gram = h * h.adjoint();
        let chol = gram.cholesky().ok_or(Error::SingularGram { tone: n })?;
        let s = DVector::from_column_slice(symbols.tone(n));
        let z = chol.solve(&s);
        let wn = h.adjoint() * z;
        if wn.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::SingularGram { tone: n });
        }
        w.tone_mut(n).copy_from_slice(wn.as_slice());
    }
    Ok(w)
}

/// Hard-limits the real and imaginary parts of every antenna signal to
/// `±ratio · RMS`, with the RMS taken separately per antenna and dimension.
pub fn clip(frame: &TimeFrame, ratio: f64) -> Result<TimeFrame> {
    if !(ratio > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "clipping ratio must be positive, got {ratio}"
        )));
    }
    let mut out = frame.clone();
    let n = frame.tones() as f64;
    for m in 0..frame.antennas() {
        let sig = out.antenna_mut(m);
        let rms_re = (sig.iter().map(|z| z.re * z.re).sum::<f64>() / n).sqrt();
        let rms_im = (sig.iter().map(|z| z.im * z.im).sum::<f64>() / n).sqrt();
        let (tr, ti) = (ratio * rms_re, ratio * rms_im);
        for z in sig.iter_mut() {
            *z = Complex64::new(z.re.clamp(-tr, tr), z.im.clamp(-ti, ti));
        }
    }
    Ok(out)
}

/// Euclidean projection onto `{u : ‖u‖₁ ≤ radius}` by sorting magnitudes.
pub fn project_l1_ball(z: &[f64], radius: f64) -> Vec<f64> {
    assert!(radius > 0.0, "l1 ball radius must be positive");
    let l1: f64 = z.iter().map(|v| v.abs()).sum();
    if l1 <= radius {
        return z.to_vec();
    }
    let mut mags: Vec<f64> = z.iter().map(|v| v.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - radius) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    z.iter()
        .map(|&v| v.signum() * (v.abs() - theta).max(0.0))
        .collect()
}

/// `prox_{τ‖·‖_∞}(z) = z - τ Π_{‖·‖₁ ≤ 1}(z / τ) = z - Π_{‖·‖₁ ≤ τ}(z)`.
pub fn prox_linf(z: &[f64], tau: f64) -> Vec<f64> {
    if tau <= 0.0 {
        return z.to_vec();
    }
    let p = project_l1_ball(z, tau);
    z.iter().zip(&p).map(|(a, b)| a - b).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitraConfig {
    pub lambda: f64,
    pub max_iters: usize,
    /// Power-iteration cap for the Lipschitz estimate.
    pub power_iters: usize,
    /// Relative change of the Rayleigh quotient that ends power iteration.
    pub power_tol: f64,
    /// Multiplier on the estimated Lipschitz constant.
    pub lipschitz_margin: f64,
    /// Reset momentum when the objective increases.
    pub restart: bool,
    pub seed: u64,
}

impl Default for FitraConfig {
    fn default() -> Self {
        FitraConfig {
            lambda: 0.25,
            max_iters: 2000,
            power_iters: 1000,
            power_tol: 1e-9,
            lipschitz_margin: 1.01,
            restart: true,
            seed: 0x5eed,
        }
    }
}

impl FitraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.max_iters == 0 || self.power_iters == 0 {
            return Err(Error::InvalidConfig(
                "FITRA needs lambda > 0 and positive iteration counts".into(),
            ));
        }
        if !(self.lipschitz_margin >= 1.0) {
            return Err(Error::InvalidConfig("lipschitz margin must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitraOutput {
    pub x: Vec<f64>,
    /// Objective of the best iterate seen so far, per iteration.
    pub best_objective: Vec<f64>,
    pub lipschitz: f64,
    pub iterations: usize,
}

/// Largest eigenvalue of `AᵀA` by power iteration.
pub fn largest_singular_sq<A: LinearOperator + ?Sized>(
    op: &A,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..op.cols())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut last = 0.0;
    for _ in 0..max_iters {
        let w = op.apply_adjoint(&op.apply(&v)?)?;
        let est = dot(&v, &w);
        let nw = norm2(&w);
        if !nw.is_finite() {
            return Err(Error::NonFinite {
                quantity: "power iterate",
                iteration: 0,
            });
        }
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / nw).collect();
        if (est - last).abs() <= tol * est.abs() {
            return Ok(est);
        }
        last = est;
    }
    Err(Error::PowerIteration {
        iterations: max_iters,
    })
}

pub fn fitra_objective<A: LinearOperator + ?Sized>(
    op: &A,
    y: &[f64],
    x: &[f64],
    lambda: f64,
) -> Result<f64> {
    let ax = op.apply(x)?;
    let res: f64 = ax.iter().zip(y).map(|(a, b)| (b - a).powi(2)).sum();
    Ok(lambda * norm_inf(x) + res)
}

/// FITRA with a per-iteration observer `(iteration, x)`.
pub fn fitra_with<A, F>(y: &[f64], op: &A, cfg: &FitraConfig, mut observe: F) -> Result<FitraOutput>
where
    A: LinearOperator + ?Sized,
    F: FnMut(usize, &[f64]),
{
    cfg.validate()?;
    check_len("fitra measurement", op.rows(), y.len())?;
    let sigma_sq = match op.spectral_norm_sq() {
        Some(s) => s,
        None => largest_singular_sq(op, cfg.power_iters, cfg.power_tol, cfg.seed)?,
    };
    let lipschitz = 2.0 * sigma_sq * cfg.lipschitz_margin;
    if !(lipschitz > 0.0) {
        return Err(Error::InvalidConfig("operator is identically zero".into()));
    }
    let step = 1.0 / lipschitz;
    let n = op.cols();
    let mut x = vec![0.0; n];
    let mut z = x.clone();
    let mut theta: f64 = 1.0;
    let mut prev_obj = f64::INFINITY;
    let mut best_obj = f64::INFINITY;
    let mut best_x = x.clone();
    let mut trace = Vec::with_capacity(cfg.max_iters);
    for it in 1..=cfg.max_iters {
        // gradient of ‖y - Az‖² is 2Aᵀ(Az - y)
        let mut r = op.apply(&z)?;
        r.iter_mut().zip(y).for_each(|(a, b)| *a -= b);
        let g = op.apply_adjoint(&r)?;
        let grad_step: Vec<f64> = z
            .iter()
            .zip(&g)
            .map(|(zi, gi)| zi - 2.0 * step * gi)
            .collect();
        let x_new = prox_linf(&grad_step, cfg.lambda * step);
        if x_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                quantity: "FITRA iterate",
                iteration: it,
            });
        }
        let obj = fitra_objective(op, y, &x_new, cfg.lambda)?;
        let theta_new = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        if cfg.restart && obj > prev_obj {
            theta = 1.0;
            z = x_new.clone();
        } else {
            let beta = (theta - 1.0) / theta_new;
            z = x_new
                .iter()
                .zip(&x)
                .map(|(a, b)| a + beta * (a - b))
                .collect();
            theta = theta_new;
        }
        if obj < best_obj {
            best_obj = obj;
            best_x.clone_from(&x_new);
        }
        trace.push(best_obj);
        prev_obj = obj;
        x = x_new;
        observe(it, &x);
    }
    Ok(FitraOutput {
        x: best_x,
        best_objective: trace,
        lipschitz,
        iterations: cfg.max_iters,
    })
}

pub fn fitra<A: LinearOperator + ?Sized>(
    y: &[f64],
    op: &A,
    cfg: &FitraConfig,
) -> Result<FitraOutput> {
    fitra_with(y, op, cfg, |_, _| {})
}

/// Explicit `K x M` matrix for tests and small experiments.
pub fn cmatrix(rows: usize, cols: usize, data: &[Complex64]) -> DMatrix<Complex64> {
    DMatrix::from_row_slice(rows, cols, data)
}
