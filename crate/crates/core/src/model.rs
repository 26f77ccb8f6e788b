//! Frames, constellation, tone partitioning and the complex/real stacking
//! that turns the per-tone precoding constraints into one real linear system.
//!
//! Index conventions used throughout the crate:
//!
//! * precoded vectors `w` are tone-major: `w[n * M + m]`,
//! * antenna frames `a` and time frames `â` are antenna-major: `a[m * N + n]`,
//! * real stacks put every real part before every imaginary part.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Symbol constellation. Scaled so that a `K`-user symbol vector has unit
/// expected energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Alphabet {
    #[default]
    #[serde(rename = "16qam")]
    Qam16,
    #[serde(rename = "qpsk")]
    Qpsk,
}

impl std::str::FromStr for Alphabet {
    type Err = Error;

    fn from_str(id: &str) -> Result<Self> {
        match id.to_ascii_lowercase().as_str() {
            "16qam" | "16-qam" | "qam16" => Ok(Alphabet::Qam16),
            "qpsk" | "4qam" | "4-qam" => Ok(Alphabet::Qpsk),
            _ => Err(Error::UnknownAlphabet(id.to_owned())),
        }
    }
}

impl Alphabet {
    /// Unscaled per-dimension amplitude levels.
    fn levels(self) -> &'static [f64] {
        match self {
            Alphabet::Qam16 => &[-3.0, -1.0, 1.0, 3.0],
            Alphabet::Qpsk => &[-1.0, 1.0],
        }
    }

    /// Mean energy of one unscaled symbol.
    fn raw_energy(self) -> f64 {
        match self {
            Alphabet::Qam16 => 10.0,
            Alphabet::Qpsk => 2.0,
        }
    }

    /// Amplitude scale giving each symbol energy `1 / users`.
    pub fn scale(self, users: usize) -> f64 {
        1.0 / (self.raw_energy() * users as f64).sqrt()
    }

    /// All scaled constellation points.
    pub fn points(self, users: usize) -> Vec<Complex64> {
        let s = self.scale(users);
        let lv = self.levels();
        let mut out = Vec::with_capacity(lv.len() * lv.len());
        for &re in lv {
            for &im in lv {
                out.push(Complex64::new(re * s, im * s));
            }
        }
        out
    }

    pub fn draw<R: Rng + ?Sized>(self, users: usize, rng: &mut R) -> Complex64 {
        let lv = self.levels();
        let s = self.scale(users);
        let re = lv[rng.random_range(0..lv.len())];
        let im = lv[rng.random_range(0..lv.len())];
        Complex64::new(re * s, im * s)
    }

    /// Nearest constellation point (per-dimension slicing).
    pub fn detect(self, r: Complex64, users: usize) -> Complex64 {
        let s = self.scale(users);
        let slice = |x: f64| -> f64 {
            let lv = self.levels();
            let top = lv[lv.len() - 1];
            // levels are odd integers spaced by 2
            let q = 2.0 * ((x / s - 1.0) / 2.0).round() + 1.0;
            q.clamp(-top, top) * s
        };
        Complex64::new(slice(r.re), slice(r.im))
    }
}

/// Dimensions and tone partition of one downlink OFDM frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemConfigRepr", into = "SystemConfigRepr")]
pub struct SystemConfig {
    pub antennas: usize,
    pub users: usize,
    pub tones: usize,
    /// Sorted data tone indices; everything else is guard band.
    pub data_tones: Vec<usize>,
    pub taps: usize,
    pub alphabet: Alphabet,
    /// Oversampling factor used when evaluating PAPR only.
    pub oversample: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ToneSpec {
    Count(usize),
    Explicit(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemConfigRepr {
    antennas: usize,
    users: usize,
    tones: usize,
    data_tones: ToneSpec,
    taps: usize,
    #[serde(default)]
    alphabet: Alphabet,
    #[serde(default = "one")]
    oversample: usize,
    #[serde(default)]
    seed: u64,
}

fn one() -> usize {
    1
}

impl TryFrom<SystemConfigRepr> for SystemConfig {
    type Error = Error;

    fn try_from(r: SystemConfigRepr) -> Result<Self> {
        let data_tones = match r.data_tones {
            ToneSpec::Count(c) => centered_tones(r.tones, c)?,
            ToneSpec::Explicit(v) => v,
        };
        let cfg = SystemConfig {
            antennas: r.antennas,
            users: r.users,
            tones: r.tones,
            data_tones,
            taps: r.taps,
            alphabet: r.alphabet,
            oversample: r.oversample,
            seed: r.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<SystemConfig> for SystemConfigRepr {
    fn from(c: SystemConfig) -> Self {
        let data_tones =
            if centered_tones(c.tones, c.data_tones.len()).ok().as_ref() == Some(&c.data_tones) {
                ToneSpec::Count(c.data_tones.len())
            } else {
                ToneSpec::Explicit(c.data_tones)
            };
        SystemConfigRepr {
            antennas: c.antennas,
            users: c.users,
            tones: c.tones,
            data_tones,
            taps: c.taps,
            alphabet: c.alphabet,
            oversample: c.oversample,
            seed: c.seed,
        }
    }
}

/// Contiguous block of `count` data tones centered in `0..tones`. Guard
/// tones are split between both ends; an odd remainder goes to the low end.
pub fn centered_tones(tones: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > tones {
        return Err(Error::InvalidConfig(format!(
            "{count} data tones do not fit in {tones} tones"
        )));
    }
    let guard = tones - count;
    let low = guard.div_ceil(2);
    Ok((low..low + count).collect())
}

impl SystemConfig {
    /// Configuration with a centered data block and 16-QAM.
    pub fn centered(
        antennas: usize,
        users: usize,
        tones: usize,
        data_tones: usize,
        taps: usize,
    ) -> Result<Self> {
        let cfg = SystemConfig {
            antennas,
            users,
            tones,
            data_tones: centered_tones(tones, data_tones)?,
            taps,
            alphabet: Alphabet::Qam16,
            oversample: 1,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.antennas == 0 || self.users == 0 || self.tones == 0 || self.taps == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.users >= self.antennas {
            return bad(format!(
                "need fewer users ({}) than antennas ({})",
                self.users, self.antennas
            ));
        }
        if self.taps > self.tones {
            return bad(format!("{} taps exceed {} tones", self.taps, self.tones));
        }
        if self.oversample == 0 {
            return bad("oversampling factor must be at least 1".into());
        }
        if self.data_tones.is_empty() {
            return bad("no data tones".into());
        }
        if self.data_tones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("data tones must be strictly increasing".into());
        }
        if *self.data_tones.last().unwrap() >= self.tones {
            return bad("data tone index out of range".into());
        }
        if self.rows() >= self.cols() {
            return bad(format!(
                "constraint system is not underdetermined (J = {} >= I = {})",
                self.rows(),
                self.cols()
            ));
        }
        Ok(())
    }

    pub fn guard_tones(&self) -> Vec<usize> {
        let mask = self.data_mask();
        (0..self.tones).filter(|&n| !mask[n]).collect()
    }

    /// `mask[n]` is true for data tones.
    pub fn data_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.tones];
        for &n in &self.data_tones {
            mask[n] = true;
        }
        mask
    }

    pub fn num_data(&self) -> usize {
        self.data_tones.len()
    }

    pub fn num_guard(&self) -> usize {
        self.tones - self.data_tones.len()
    }

    /// Number of real constraints `J`.
    pub fn rows(&self) -> usize {
        2 * (self.num_data() * self.users + self.num_guard() * self.antennas)
    }

    /// Number of real unknowns `I`.
    pub fn cols(&self) -> usize {
        2 * self.tones * self.antennas
    }

    pub fn layout(&self) -> StackLayout {
        StackLayout::new(self)
    }
}

/// Maps (tone, user) / (tone, antenna) constraint coordinates and
/// (antenna, time) signal coordinates onto flat real-stack indices.
#[derive(Clone, Debug, PartialEq)]
pub struct StackLayout {
    pub antennas: usize,
    pub users: usize,
    pub tones: usize,
    /// Complex row offset of each tone's block; length `tones + 1`.
    pub row_offset: Vec<usize>,
    pub is_data: Vec<bool>,
}

impl StackLayout {
    pub fn new(cfg: &SystemConfig) -> Self {
        let is_data = cfg.data_mask();
        let mut row_offset = Vec::with_capacity(cfg.tones + 1);
        let mut acc = 0;
        for &d in &is_data {
            row_offset.push(acc);
            acc += if d { cfg.users } else { cfg.antennas };
        }
        row_offset.push(acc);
        StackLayout {
            antennas: cfg.antennas,
            users: cfg.users,
            tones: cfg.tones,
            row_offset,
            is_data,
        }
    }

    /// Complex constraint count `J / 2`.
    pub fn complex_rows(&self) -> usize {
        self.row_offset[self.tones]
    }

    /// Complex unknown count `I / 2`.
    pub fn complex_cols(&self) -> usize {
        self.antennas * self.tones
    }

    pub fn rows(&self) -> usize {
        2 * self.complex_rows()
    }

    pub fn cols(&self) -> usize {
        2 * self.complex_cols()
    }

    /// Width of the constraint block on tone `n`.
    pub fn block_len(&self, n: usize) -> usize {
        self.row_offset[n + 1] - self.row_offset[n]
    }

    /// Complex column index of time sample `t` on antenna `m`.
    pub fn col(&self, m: usize, t: usize) -> usize {
        m * self.tones + t
    }
}

macro_rules! frame_type {
    ($(#[$meta:meta])* $name:ident, $outer:ident, $inner:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $outer: usize,
            $inner: usize,
            data: Vec<Complex64>,
        }

        impl $name {
            pub fn new($outer: usize, $inner: usize, data: Vec<Complex64>) -> Result<Self> {
                check_len(stringify!($name), $outer * $inner, data.len())?;
                Ok(Self { $outer, $inner, data })
            }

            pub fn zeros($outer: usize, $inner: usize) -> Self {
                Self { $outer, $inner, data: vec![Complex64::default(); $outer * $inner] }
            }

            pub fn $outer(&self) -> usize {
                self.$outer
            }

            pub fn $inner(&self) -> usize {
                self.$inner
            }

            pub fn as_slice(&self) -> &[Complex64] {
                &self.data
            }

            pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<Complex64> {
                self.data
            }

            pub fn norm_sqr(&self) -> f64 {
                self.data.iter().map(|c| c.norm_sqr()).sum()
            }
        }
    };
}

frame_type!(
    /// Per-tone user symbols `s_n`, tone-major.
    SymbolFrame, tones, users
);
frame_type!(
    /// Per-tone precoded vectors `w_n`, tone-major.
    PrecodedFrame, tones, antennas
);
frame_type!(
    /// Frequency-domain antenna signals `a_m`, antenna-major.
    AntennaFrame, antennas, tones
);
frame_type!(
    /// Time-domain antenna signals `â_m`, antenna-major.
    TimeFrame, antennas, tones
);

impl SymbolFrame {
    pub fn tone(&self, n: usize) -> &[Complex64] {
        &self.data[n * self.users..(n + 1) * self.users]
    }
}

impl PrecodedFrame {
    pub fn tone(&self, n: usize) -> &[Complex64] {
        &self.data[n * self.antennas..(n + 1) * self.antennas]
    }

    pub fn tone_mut(&mut self, n: usize) -> &mut [Complex64] {
        &mut self.data[n * self.antennas..(n + 1) * self.antennas]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            tones: self.tones,
            antennas: self.antennas,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }
}

impl AntennaFrame {
    pub fn antenna(&self, m: usize) -> &[Complex64] {
        &self.data[m * self.tones..(m + 1) * self.tones]
    }

    /// Inverse of [`reorder`].
    pub fn to_precoded(&self) -> PrecodedFrame {
        let (m_count, n_count) = (self.antennas, self.tones);
        let mut w = PrecodedFrame::zeros(n_count, m_count);
        for m in 0..m_count {
            for n in 0..n_count {
                w.data[n * m_count + m] = self.data[m * n_count + n];
            }
        }
        w
    }
}

impl TimeFrame {
    pub fn antenna(&self, m: usize) -> &[Complex64] {
        &self.data[m * self.tones..(m + 1) * self.tones]
    }

    pub fn antenna_mut(&mut self, m: usize) -> &mut [Complex64] {
        &mut self.data[m * self.tones..(m + 1) * self.tones]
    }

    /// `x = [Re â; Im â]`.
    pub fn to_real_stack(&self) -> Vec<f64> {
        stack_real(&self.data)
    }

    pub fn from_real_stack(antennas: usize, tones: usize, x: &[f64]) -> Result<Self> {
        check_len("real stack", 2 * antennas * tones, x.len())?;
        Self::new(antennas, tones, unstack_real(x)?)
    }
}

/// Draws i.i.d. uniform constellation symbols on data tones; guard tones
/// stay exactly zero.
pub fn generate_symbols<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> SymbolFrame {
    let k = cfg.users;
    let mut frame = SymbolFrame::zeros(cfg.tones, k);
    for &n in &cfg.data_tones {
        for slot in &mut frame.data[n * k..(n + 1) * k] {
            *slot = cfg.alphabet.draw(k, rng);
        }
    }
    frame
}

/// Distributes each precoded vector onto the antennas: `a_m[n] = w_n[m]`.
pub fn reorder(w: &PrecodedFrame) -> AntennaFrame {
    let (n_count, m_count) = (w.tones, w.antennas);
    let mut a = AntennaFrame::zeros(m_count, n_count);
    for n in 0..n_count {
        for m in 0..m_count {
            a.data[m * n_count + n] = w.data[n * m_count + m];
        }
    }
    a
}

/// Unitary length-`N` DFT pair with cached plans.
#[derive(Clone)]
pub struct UnitaryDft {
    len: usize,
    scale: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for UnitaryDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnitaryDft")
            .field("len", &self.len)
            .finish()
    }
}

impl UnitaryDft {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        UnitaryDft {
            len,
            scale: 1.0 / (len as f64).sqrt(),
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// In-place `F_N` on every consecutive length-`N` chunk.
    pub fn forward_chunks(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
        buf.iter_mut().for_each(|z| *z *= self.scale);
    }

    /// In-place `F_N^H` on every consecutive length-`N` chunk.
    pub fn inverse_chunks(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
        buf.iter_mut().for_each(|z| *z *= self.scale);
    }
}

/// `â_m = F_N^H a_m` for every antenna.
pub fn idft_frame(a: &AntennaFrame) -> TimeFrame {
    let mut data = a.data.clone();
    if a.tones > 0 {
        UnitaryDft::new(a.tones).inverse_chunks(&mut data);
    }
    TimeFrame {
        antennas: a.antennas,
        tones: a.tones,
        data,
    }
}

/// `a_m = F_N â_m` for every antenna.
pub fn dft_frame(t: &TimeFrame) -> AntennaFrame {
    let mut data = t.data.clone();
    if t.tones > 0 {
        UnitaryDft::new(t.tones).forward_chunks(&mut data);
    }
    AntennaFrame {
        antennas: t.antennas,
        tones: t.tones,
        data,
    }
}

/// `[Re z; Im z]`.
pub fn stack_real(z: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * z.len());
    out.extend(z.iter().map(|c| c.re));
    out.extend(z.iter().map(|c| c.im));
    out
}

/// Inverse of [`stack_real`].
pub fn unstack_real(x: &[f64]) -> Result<Vec<Complex64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::DimensionMismatch {
            context: "real stack (odd length)",
            expected: x.len() + 1,
            actual: x.len(),
        });
    }
    let (re, im) = x.split_at(x.len() / 2);
    Ok(re
        .iter()
        .zip(im)
        .map(|(&r, &i)| Complex64::new(r, i))
        .collect())
}

/// The complex left-hand side `s̄`: `s_n` on data tones, `0_M` on guard tones,
/// concatenated in tone order.
pub fn symbol_stack(cfg: &SystemConfig, symbols: &SymbolFrame) -> Result<Vec<Complex64>> {
    check_len("symbol frame tones", cfg.tones, symbols.tones)?;
    check_len("symbol frame users", cfg.users, symbols.users)?;
    let layout = cfg.layout();
    let mut out = vec![Complex64::default(); layout.complex_rows()];
    for &n in &cfg.data_tones {
        let off = layout.row_offset[n];
        out[off..off + cfg.users].copy_from_slice(symbols.tone(n));
    }
    Ok(out)
}

/// Real measurement vector `y = [Re s̄; Im s̄]`.
pub fn measurement(cfg: &SystemConfig, symbols: &SymbolFrame) -> Result<Vec<f64>> {
    Ok(stack_real(&symbol_stack(cfg, symbols)?))
}

/// Time-domain frame of a precoded frame (`reorder` followed by the IDFT).
pub fn precoded_to_time(w: &PrecodedFrame) -> TimeFrame {
    idft_frame(&reorder(w))
}

/// Precoded frame recovered from a time-domain frame.
pub fn time_to_precoded(t: &TimeFrame) -> PrecodedFrame {
    dft_frame(t).to_precoded()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn centered_block_puts_odd_guard_low() {
        assert_eq!(centered_tones(8, 5).unwrap(), vec![2, 3, 4, 5, 6]);
        let t = centered_tones(128, 114).unwrap();
        assert_eq!((t[0], *t.last().unwrap()), (7, 120));
        assert!(centered_tones(4, 5).is_err());
    }

    #[test]
    fn dimensions_follow_constraint_count() {
        let cfg = SystemConfig::centered(100, 10, 128, 114, 8).unwrap();
        assert_eq!(cfg.rows(), 2 * (114 * 10 + 14 * 100));
        assert_eq!(cfg.cols(), 2 * 128 * 100);
        assert_eq!(cfg.guard_tones().len(), 14);
        assert_eq!(cfg.layout().rows(), cfg.rows());
    }

    #[test]
    fn config_rejects_overdetermined_and_bad_users() {
        assert!(SystemConfig::centered(4, 4, 16, 12, 2).is_err());
        assert!(SystemConfig::centered(4, 0, 16, 12, 2).is_err());
        assert!(SystemConfig::centered(8, 2, 16, 12, 17).is_err());
    }

    #[test]
    fn config_json_accepts_count_or_list() {
        let cfg: SystemConfig =
            serde_json::from_str(r#"{"antennas":8,"users":2,"tones":16,"data_tones":12,"taps":2}"#)
                .unwrap();
        assert_eq!(cfg.data_tones, centered_tones(16, 12).unwrap());
        assert_eq!(cfg.alphabet, Alphabet::Qam16);
        let explicit: SystemConfig = serde_json::from_str(
            r#"{"antennas":8,"users":2,"tones":16,"data_tones":[1,2,3],"taps":2,"alphabet":"qpsk"}"#,
        )
        .unwrap();
        assert_eq!(explicit.data_tones, vec![1, 2, 3]);
        let back: SystemConfig =
            serde_json::from_str(&serde_json::to_string(&explicit).unwrap()).unwrap();
        assert_eq!(back, explicit);
        assert!(serde_json::from_str::<SystemConfig>(
            r#"{"antennas":8,"users":2,"tones":16,"data_tones":12,"taps":2,"alphabet":"64qam"}"#
        )
        .is_err());
    }

    #[test]
    fn unknown_alphabet_is_rejected() {
        assert!(matches!(
            "8psk".parse::<Alphabet>(),
            Err(Error::UnknownAlphabet(_))
        ));
        assert_eq!("16QAM".parse::<Alphabet>().unwrap(), Alphabet::Qam16);
    }

    #[test]
    fn guard_symbols_are_exactly_zero() {
        let mut cfg = SystemConfig::centered(8, 2, 16, 12, 2).unwrap();
        cfg.data_tones = (2..14).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_symbols(&cfg, &mut rng);
        for n in [0, 1, 14, 15] {
            assert!(s.tone(n).iter().all(|z| *z == Complex64::default()));
        }
        assert!(s.tone(5).iter().all(|z| z.norm() > 0.0));
    }

    #[test]
    fn qam16_points_and_unit_vector_energy() {
        let k = 10;
        let scale = Alphabet::Qam16.scale(k);
        let allowed = [-3.0, -1.0, 1.0, 3.0];
        let cfg = SystemConfig::centered(20, k, 4, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut energy = 0.0;
        let draws = 25_000;
        for _ in 0..draws {
            let s = generate_symbols(&cfg, &mut rng);
            for n in 0..4 {
                let tone = s.tone(n);
                for z in tone {
                    let (re, im) = (z.re / scale, z.im / scale);
                    assert!(allowed.iter().any(|a| (a - re).abs() < 1e-12));
                    assert!(allowed.iter().any(|a| (a - im).abs() < 1e-12));
                }
                energy += tone.iter().map(|z| z.norm_sqr()).sum::<f64>();
            }
        }
        // 10^5 tone vectors
        let mean = energy / (4 * draws) as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean energy {mean}");
    }

    #[test]
    fn equal_seeds_give_equal_frames() {
        let cfg = SystemConfig::centered(8, 2, 16, 12, 2).unwrap();
        let a = generate_symbols(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = generate_symbols(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn detect_returns_nearest_point() {
        for alphabet in [Alphabet::Qam16, Alphabet::Qpsk] {
            let pts = alphabet.points(3);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..500 {
                let r = c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let best = pts
                    .iter()
                    .min_by(|a, b| (*a - r).norm().total_cmp(&(*b - r).norm()))
                    .unwrap();
                assert!((alphabet.detect(r, 3) - best).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn reorder_is_a_transpose() {
        let (w11, w12, w21, w22) = (c(1.0, 0.0), c(2.0, 0.0), c(3.0, 1.0), c(4.0, -1.0));
        let w = PrecodedFrame::new(2, 2, vec![w11, w12, w21, w22]).unwrap();
        let a = reorder(&w);
        assert_eq!(a.antenna(0), &[w11, w21]);
        assert_eq!(a.antenna(1), &[w12, w22]);
        assert_eq!(a.to_precoded(), w);
        assert!((a.norm_sqr() - w.norm_sqr()).abs() < 1e-15);
    }

    #[test]
    fn frame_length_mismatch_is_an_error() {
        assert!(PrecodedFrame::new(2, 3, vec![Complex64::default(); 5]).is_err());
        assert!(TimeFrame::from_real_stack(2, 2, &[0.0; 6]).is_err());
        assert!(unstack_real(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn idft_of_unit_tone_is_flat() {
        let n = 8;
        let mut a = AntennaFrame::zeros(1, n);
        a.as_mut_slice()[0] = c(1.0, 0.0);
        let t = idft_frame(&a);
        let level = 1.0 / (n as f64).sqrt();
        assert!(t
            .as_slice()
            .iter()
            .all(|z| (z - c(level, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn idft_of_flat_spectrum_is_impulse() {
        let a = AntennaFrame::new(1, 4, vec![c(1.0, 0.0); 4]).unwrap();
        let t = idft_frame(&a);
        let expected = [c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        assert!(max_abs_diff(t.as_slice(), &expected) < 1e-15);
    }

    #[test]
    fn dft_pair_is_unitary_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<_> = (0..3 * 32)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let a = AntennaFrame::new(3, 32, data).unwrap();
        let t = idft_frame(&a);
        for m in 0..3 {
            let na: f64 = a.antenna(m).iter().map(|z| z.norm_sqr()).sum();
            let nt: f64 = t.antenna(m).iter().map(|z| z.norm_sqr()).sum();
            assert!((na - nt).abs() <= 1e-12 * na);
        }
        let back = dft_frame(&t);
        let rel = max_abs_diff(back.as_slice(), a.as_slice()) / a.norm_sqr().sqrt();
        assert!(rel < 1e-12);
    }

    #[test]
    fn real_stacking() {
        let z = [c(1.0, 2.0)];
        let y = stack_real(&z);
        assert_eq!(y, vec![1.0, 2.0]);
        assert_eq!(unstack_real(&y).unwrap(), z.to_vec());
        let z = [c(1.0, -2.0), c(0.5, 3.0), c(-1.0, 0.0)];
        let y = stack_real(&z);
        assert_eq!(y, vec![1.0, 0.5, -1.0, -2.0, 3.0, 0.0]);
        let n2: f64 = y.iter().map(|v| v * v).sum();
        let nz: f64 = z.iter().map(|v| v.norm_sqr()).sum();
        assert!((n2 - nz).abs() < 1e-15);
    }

    #[test]
    fn symbol_stack_has_guard_blocks() {
        let cfg = SystemConfig::centered(4, 2, 8, 6, 2).unwrap();
        let s = generate_symbols(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let bar = symbol_stack(&cfg, &s).unwrap();
        // tone 0 guard (4 rows), tones 1..=6 data (2 rows each), tone 7 guard
        assert_eq!(bar.len(), 4 + 12 + 4);
        assert!(bar[..4].iter().all(|z| z.norm() == 0.0));
        assert_eq!(&bar[4..6], s.tone(1));
        assert_eq!(measurement(&cfg, &s).unwrap().len(), cfg.rows());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn stack_and_transform_round_trips(
                m in 1usize..4,
                n in 1usize..17,
                seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data: Vec<_> = (0..m * n)
                    .map(|_| c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                    .collect();
                let w = PrecodedFrame::new(n, m, data).unwrap();
                let t = precoded_to_time(&w);
                let x = t.to_real_stack();
                let t2 = TimeFrame::from_real_stack(m, n, &x).unwrap();
                prop_assert_eq!(&t2, &t);
                let w2 = time_to_precoded(&t2);
                let scale = w.norm_sqr().sqrt().max(1e-300);
                prop_assert!(max_abs_diff(w2.as_slice(), w.as_slice()) / scale < 1e-12);
                let xn: f64 = x.iter().map(|v| v * v).sum();
                prop_assert!((xn - w.norm_sqr()).abs() <= 1e-12 * w.norm_sqr().max(1.0));
            }
        }
    }
}
