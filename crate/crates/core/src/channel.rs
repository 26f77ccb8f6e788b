//! Tap-delay-line MIMO channel and its per-tone frequency response.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Time-domain channel taps `Ĥ_1..Ĥ_D`, each `K x M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapChannel {
    pub users: usize,
    pub antennas: usize,
    /// One row-major `K x M` matrix per tap.
    pub taps: Vec<Vec<Complex64>>,
}

/// Per-tone channel matrices `H_0..H_{N-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqChannel {
    pub users: usize,
    pub antennas: usize,
    pub tones: Vec<DMatrix<Complex64>>,
}

/// Draws `D` matrices with i.i.d. CN(0, 1) entries.
pub fn draw_taps<R: Rng + ?Sized>(
    users: usize,
    antennas: usize,
    taps: usize,
    rng: &mut R,
) -> Result<TapChannel> {
    if users == 0 || antennas == 0 || taps == 0 {
        return Err(Error::InvalidConfig(
            "channel dimensions must be positive".into(),
        ));
    }
    let sd = std::f64::consts::FRAC_1_SQRT_2;
    let taps = (0..taps)
        .map(|_| {
            (0..users * antennas)
                .map(|_| {
                    let re: f64 = StandardNormal.sample(rng);
                    let im: f64 = StandardNormal.sample(rng);
                    Complex64::new(sd * re, sd * im)
                })
                .collect()
        })
        .collect();
    Ok(TapChannel {
        users,
        antennas,
        taps,
    })
}

/// `H_n = Σ_{d=1}^{D} Ĥ_d exp(-j2π d n / N)` for `n = 0..N-1`.
pub fn freq_response(taps: &TapChannel, tones: usize) -> Result<FreqChannel> {
    if taps.taps.len() > tones {
        return Err(Error::InvalidConfig(format!(
            "{} taps exceed {} tones",
            taps.taps.len(),
            tones
        )));
    }
    let (k, m) = (taps.users, taps.antennas);
    for tap in &taps.taps {
        check_len("tap matrix", k * m, tap.len())?;
    }
    let mut out = Vec::with_capacity(tones);
    for n in 0..tones {
        let mut h = DMatrix::<Complex64>::zeros(k, m);
        for (idx, tap) in taps.taps.iter().enumerate() {
            // tap index d runs from 1; reduce d*n mod N to keep the phase exact
            let phase = -2.0 * PI * (((idx + 1) * n) % tones) as f64 / tones as f64;
            let rot = Complex64::from_polar(1.0, phase);
            for r in 0..k {
                for c in 0..m {
                    h[(r, c)] += tap[r * m + c] * rot;
                }
            }
        }
        out.push(h);
    }
    Ok(FreqChannel {
        users: k,
        antennas: m,
        tones: out,
    })
}

impl TapChannel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ch: TapChannel = serde_json::from_str(s)?;
        for tap in &ch.taps {
            check_len("tap matrix", ch.users * ch.antennas, tap.len())?;
        }
        Ok(ch)
    }

    pub fn frobenius_sqr(&self) -> f64 {
        self.taps.iter().flatten().map(|z| z.norm_sqr()).sum()
    }
}

impl FreqChannel {
    pub fn num_tones(&self) -> usize {
        self.tones.len()
    }

    pub fn tone(&self, n: usize) -> &DMatrix<Complex64> {
        &self.tones[n]
    }

    pub fn frobenius_sqr(&self) -> f64 {
        self.tones
            .iter()
            .flat_map(|h| h.iter())
            .map(|z| z.norm_sqr())
            .sum()
    }
}
