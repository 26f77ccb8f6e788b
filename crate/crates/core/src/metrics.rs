//! PAPR, MUI, OBR, empirical CCDF and Monte-Carlo symbol error rate.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::channel::FreqChannel;
use crate::error::{check_len, Error, Result};
use crate::model::{time_to_precoded, PrecodedFrame, SymbolFrame, SystemConfig, TimeFrame};

/// Reported value for ratios whose numerator is exactly zero.
pub const DB_FLOOR: f64 = -300.0;

/// `10 log10(x)`, floored at [`DB_FLOOR`].
pub fn db(x: f64) -> f64 {
    if x > 0.0 {
        (10.0 * x.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

pub fn from_db(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}

/// Mean of dB values taken in the linear domain, returned in dB.
pub fn mean_db(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    db(values.iter().map(|v| from_db(*v)).sum::<f64>() / values.len() as f64)
}

/// `max(‖Re z‖∞, ‖Im z‖∞)`.
pub fn peak_component(z: &[Complex64]) -> f64 {
    z.iter().fold(0.0, |m, c| m.max(c.re.abs()).max(c.im.abs()))
}

/// Linear PAPR `2N · peak² / ‖â‖²` of one time-domain antenna signal.
///
/// With `oversample = L > 1` the signal is interpolated first: its spectrum
/// is zero-padded at the end to `LN` bins and brought back with a length-`LN`
/// inverse DFT, and `LN` replaces `N`.
pub fn papr_linear(signal: &[Complex64], oversample: usize) -> Result<f64> {
    if oversample == 0 {
        return Err(Error::InvalidConfig(
            "oversampling factor must be at least 1".into(),
        ));
    }
    let energy: f64 = signal.iter().map(|c| c.norm_sqr()).sum();
    if !(energy > 0.0) {
        return Err(Error::Metric {
            metric: "papr",
            reason: "zero signal".into(),
        });
    }
    if oversample == 1 {
        let peak = peak_component(signal);
        return Ok(2.0 * signal.len() as f64 * peak * peak / energy);
    }
    let n = signal.len();
    let ln = n * oversample;
    let mut planner = FftPlanner::new();
    let mut spec = signal.to_vec();
    planner.plan_fft_forward(n).process(&mut spec);
    spec.resize(ln, Complex64::default());
    planner.plan_fft_inverse(ln).process(&mut spec);
    let energy: f64 = spec.iter().map(|c| c.norm_sqr()).sum();
    let peak = peak_component(&spec);
    Ok(2.0 * ln as f64 * peak * peak / energy)
}

pub fn papr_db(signal: &[Complex64], oversample: usize) -> Result<f64> {
    Ok(db(papr_linear(signal, oversample)?))
}

/// Per-antenna PAPR of a time-domain frame, in dB.
pub fn antenna_paprs(frame: &TimeFrame, oversample: usize) -> Result<Vec<f64>> {
    (0..frame.antennas())
        .map(|m| papr_db(frame.antenna(m), oversample))
        .collect()
}

/// Linear MUI `Σ_T ‖s_n - H_n w_n‖² / Σ_T ‖s_n‖²`.
pub fn mui_linear(
    cfg: &SystemConfig,
    symbols: &SymbolFrame,
    w: &PrecodedFrame,
    channel: &FreqChannel,
) -> Result<f64> {
    check_len("mui symbol tones", cfg.tones, symbols.tones())?;
    check_len("mui precoded tones", cfg.tones, w.tones())?;
    check_len("mui antennas", cfg.antennas, w.antennas())?;
    check_len("mui channel tones", cfg.tones, channel.num_tones())?;
    let (mut num, mut den) = (0.0, 0.0);
    for &n in &cfg.data_tones {
        let h = channel.tone(n);
        let wn = w.tone(n);
        for (k, s) in symbols.tone(n).iter().enumerate() {
            let mut hw = Complex64::default();
            for (m, x) in wn.iter().enumerate() {
                hw += h[(k, m)] * x;
            }
            num += (s - hw).norm_sqr();
            den += s.norm_sqr();
        }
    }
    if den == 0.0 {
        return Err(Error::Metric {
            metric: "mui",
            reason: "zero symbol energy".into(),
        });
    }
    Ok(num / den)
}

pub fn mui(
    cfg: &SystemConfig,
    symbols: &SymbolFrame,
    w: &PrecodedFrame,
    channel: &FreqChannel,
) -> Result<f64> {
    Ok(db(mui_linear(cfg, symbols, w, channel)?))
}

/// Linear OBR `|T| Σ_{guard} ‖w_n‖² / (|Tᶜ| Σ_T ‖w_n‖²)`.
pub fn obr_linear(cfg: &SystemConfig, w: &PrecodedFrame) -> Result<f64> {
    check_len("obr tones", cfg.tones, w.tones())?;
    let mask = cfg.data_mask();
    let (mut inband, mut guard) = (0.0, 0.0);
    for (n, is_data) in mask.iter().enumerate() {
        let p: f64 = w.tone(n).iter().map(|c| c.norm_sqr()).sum();
        if *is_data {
            inband += p;
        } else {
            guard += p;
        }
    }
    let n_guard = cfg.num_guard();
    if n_guard == 0 {
        return Err(Error::Metric {
            metric: "obr",
            reason: "no guard tones".into(),
        });
    }
    if inband == 0.0 {
        return Err(Error::Metric {
            metric: "obr",
            reason: "zero in-band power".into(),
        });
    }
    Ok(cfg.num_data() as f64 * guard / (n_guard as f64 * inband))
}

pub fn obr(cfg: &SystemConfig, w: &PrecodedFrame) -> Result<f64> {
    Ok(db(obr_linear(cfg, w)?))
}

/// Empirical `P(X > t)` for every threshold.
pub fn ccdf(samples: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Metric {
            metric: "ccdf",
            reason: "no samples".into(),
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|t| {
            let at_or_below = sorted.partition_point(|x| x <= t);
            (sorted.len() - at_or_below) as f64 / n
        })
        .collect())
}

/// Smallest sample `t` with `P(X > t) ≤ p`.
pub fn ccdf_quantile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() || !(0.0..=1.0).contains(&p) {
        return Err(Error::Metric {
            metric: "ccdf quantile",
            reason: format!("{} samples, p = {p}", samples.len()),
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let above = ((p * n as f64) + 1e-9).floor() as usize;
    Ok(sorted[n - 1 - above.min(n - 1)])
}

/// Evenly spaced thresholds from `lo` to `hi` inclusive.
pub fn threshold_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step).round() as usize;
    (0..=count).map(|i| lo + i as f64 * step).collect()
}

/// Noise power per complex entry for a given SNR, `N_o = ‖x‖² / (M · 10^{SNR/10})`.
pub fn noise_power(x_hat: &[f64], antennas: usize, snr_db: f64) -> f64 {
    let energy: f64 = x_hat.iter().map(|x| x * x).sum();
    energy / (antennas as f64 * from_db(snr_db))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerCount {
    pub errors: u64,
    pub symbols: u64,
}

impl SerCount {
    pub fn rate(&self) -> f64 {
        if self.symbols == 0 {
            0.0
        } else {
            self.errors as f64 / self.symbols as f64
        }
    }

    pub fn merge(&mut self, other: SerCount) {
        self.errors += other.errors;
        self.symbols += other.symbols;
    }
}

/// Sends the frame given by the real stack `x_hat` through the channel with
/// complex Gaussian noise `N_o` per receive entry, `draws` times, and counts
/// nearest-point detection errors on data tones.
pub fn ser_simulate<R: Rng + ?Sized>(
    x_hat: &[f64],
    symbols: &SymbolFrame,
    channel: &FreqChannel,
    cfg: &SystemConfig,
    snr_db: f64,
    draws: usize,
    rng: &mut R,
) -> Result<SerCount> {
    let frame = TimeFrame::from_real_stack(cfg.antennas, cfg.tones, x_hat)?;
    let w = time_to_precoded(&frame);
    check_len("ser channel tones", cfg.tones, channel.num_tones())?;
    check_len("ser symbol tones", cfg.tones, symbols.tones())?;
    let sd = (noise_power(x_hat, cfg.antennas, snr_db) / 2.0).sqrt();
    // noiseless receive vectors, one per data tone
    let clean: Vec<Vec<Complex64>> = cfg
        .data_tones
        .iter()
        .map(|&n| {
            let h = channel.tone(n);
            let wn = w.tone(n);
            (0..cfg.users)
                .map(|k| wn.iter().enumerate().map(|(m, x)| h[(k, m)] * x).sum())
                .collect()
        })
        .collect();
    let tol = 1e-6 * cfg.alphabet.scale(cfg.users);
    let mut count = SerCount::default();
    for _ in 0..draws {
        for (t, &n) in cfg.data_tones.iter().enumerate() {
            for (k, s) in symbols.tone(n).iter().enumerate() {
                let e_re: f64 = StandardNormal.sample(rng);
                let e_im: f64 = StandardNormal.sample(rng);
                let r = clean[t][k] + Complex64::new(sd * e_re, sd * e_im);
                let d = cfg.alphabet.detect(r, cfg.users);
                count.errors += ((d - s).norm() > tol) as u64;
                count.symbols += 1;
            }
        }
    }
    Ok(count)
}

/// Per-trial, per-solver measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub solver: String,
    /// PAPR of every antenna, dB.
    pub papr_db: Vec<f64>,
    pub mui_db: f64,
    pub obr_db: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    /// Share of entries on the boundary, for solvers that have one.
    pub boundary_fraction: Option<f64>,
    /// `(snr_db, errors, symbols)` for every SNR point simulated.
    pub ser: Vec<(f64, SerCount)>,
}

impl TrialRecord {
    /// Antenna-averaged PAPR in dB (mean of the linear values).
    pub fn mean_papr_db(&self) -> f64 {
        mean_db(&self.papr_db)
    }
}
