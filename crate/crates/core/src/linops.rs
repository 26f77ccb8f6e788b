//! The real-valued constraint operator `A` mapping a stacked time-domain
//! signal `x = [Re â; Im â]` onto the stacked constraint values
//! `y = [Re s̄; Im s̄]`.
//!
//! Per complex row, the operator is `C = H̄ Tᵀ (I_M ⊗ F_N)`: data tones
//! apply `H_n` to the DFT of every antenna signal, guard tones pick out the
//! DFT values themselves. `A` is the real representation
//! `[[Re C, -Im C], [Im C, Re C]]`.
//!
//! Two forms exist. [`OperatorMode::Dense`] materializes `A` and serves as
//! the correctness reference. [`OperatorMode::Fast`] works on the factors
//! with per-antenna FFTs and never forms `A`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::channel::FreqChannel;
use crate::error::{check_len, Error, Result};
use crate::model::{stack_real, unstack_real, StackLayout, SystemConfig, UnitaryDft};

/// Default dense budget in matrix entries (`J * I`).
pub const DEFAULT_DENSE_BUDGET: usize = 200_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorMode {
    Dense,
    Fast,
}

/// How the fast form evaluates the entrywise-squared products.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Exact `(A⊙A)v` through the double-frequency FFT identity.
    Exact,
    /// Every entry of `A⊙A` replaced by the mean square `‖A‖_F² / (J I)`.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Adjoint,
}

/// Result of an entrywise-squared product, tagged with whether it is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct SquaredProduct {
    pub values: Vec<f64>,
    pub exact: bool,
}

/// A real linear map with the products GAMP and the proximal solvers need.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn apply_adjoint(&self, r: &[f64]) -> Result<Vec<f64>>;
    /// `(A⊙A) v` for [`Direction::Forward`], `(A⊙A)ᵀ v` for the adjoint.
    fn apply_squared(&self, v: &[f64], direction: Direction) -> Result<SquaredProduct>;
    /// `‖A‖_F²`.
    fn frob_sq(&self) -> f64;
    /// Induced ∞-norm (largest absolute row sum).
    fn inf_norm(&self) -> f64;
    /// `σ_max(A)²` when the operator knows it in closed form.
    fn spectral_norm_sq(&self) -> Option<f64> {
        None
    }
}

fn check_nonnegative(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !(*x >= 0.0)) {
        Some(index) => Err(Error::NegativeVariance {
            index,
            value: v[index],
        }),
        None => Ok(()),
    }
}

/// Scalar-variance replacement of `(A⊙A)v`: every output equals
/// `‖A‖_F² / (J I) · Σ v`.
pub fn scalar_variance_product(
    frob_sq: f64,
    rows: usize,
    cols: usize,
    v: &[f64],
    direction: Direction,
) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    let mean_sq = frob_sq / (rows as f64 * cols as f64);
    let out_len = match direction {
        Direction::Forward => rows,
        Direction::Adjoint => cols,
    };
    vec![mean_sq * sum; out_len]
}

/// Row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("dense matrix", rows * cols, data.len())?;
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        DenseMatrix {
            rows: n,
            cols: n,
            data,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl LinearOperator for DenseMatrix {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("apply input", self.cols, x.len())?;
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn apply_adjoint(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_len("adjoint input", self.rows, r.len())?;
        let mut out = vec![0.0; self.cols];
        for (row, &rv) in r.iter().enumerate() {
            if rv == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(row)) {
                *o += a * rv;
            }
        }
        Ok(out)
    }

    fn apply_squared(&self, v: &[f64], direction: Direction) -> Result<SquaredProduct> {
        check_nonnegative(v)?;
        let values = match direction {
            Direction::Forward => {
                check_len("squared input", self.cols, v.len())?;
                (0..self.rows)
                    .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * a * b).sum())
                    .collect()
            }
            Direction::Adjoint => {
                check_len("squared adjoint input", self.rows, v.len())?;
                let mut out = vec![0.0; self.cols];
                for (row, &rv) in v.iter().enumerate() {
                    if rv == 0.0 {
                        continue;
                    }
                    for (o, a) in out.iter_mut().zip(self.row(row)) {
                        *o += a * a * rv;
                    }
                }
                out
            }
        };
        Ok(SquaredProduct {
            values,
            exact: true,
        })
    }

    fn frob_sq(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    fn inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|a| a.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorOptions {
    pub mode: OperatorMode,
    pub variance: VarianceMode,
    /// Largest dense `J * I` accepted.
    pub dense_budget: usize,
}

impl Default for OperatorOptions {
    fn default() -> Self {
        OperatorOptions {
            mode: OperatorMode::Fast,
            variance: VarianceMode::Exact,
            dense_budget: DEFAULT_DENSE_BUDGET,
        }
    }
}

impl OperatorOptions {
    pub fn dense() -> Self {
        OperatorOptions {
            mode: OperatorMode::Dense,
            ..Self::default()
        }
    }

    pub fn fast(variance: VarianceMode) -> Self {
        OperatorOptions {
            mode: OperatorMode::Fast,
            variance,
            ..Self::default()
        }
    }
}

/// The constraint operator of one channel realization.
#[derive(Clone)]
pub struct ConstraintOperator {
    layout: StackLayout,
    mode: OperatorMode,
    variance: VarianceMode,
    /// Row-major `K x M` channel matrix per tone; `None` on guard tones.
    channel: Vec<Option<Vec<Complex64>>>,
    dense: Option<DenseMatrix>,
    frob_sq: f64,
    inf_norm: f64,
    spectral_sq: f64,
    dft: UnitaryDft,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ConstraintOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConstraintOperator")
            .field("mode", &self.mode)
            .field("variance", &self.variance)
            .field("rows", &self.layout.rows())
            .field("cols", &self.layout.cols())
            .field("frob_sq", &self.frob_sq)
            .field("inf_norm", &self.inf_norm)
            .finish()
    }
}

/// `exp(-j2π k / N)` for `k = 0..N-1`.
fn twiddles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
        .collect()
}

impl ConstraintOperator {
    pub fn build(
        channel: &FreqChannel,
        cfg: &SystemConfig,
        options: OperatorOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        check_len("channel tones", cfg.tones, channel.num_tones())?;
        check_len("channel users", cfg.users, channel.users)?;
        check_len("channel antennas", cfg.antennas, channel.antennas)?;
        let layout = cfg.layout();
        let (k_users, m_ant, n_tones) = (cfg.users, cfg.antennas, cfg.tones);

        let per_tone: Vec<Option<Vec<Complex64>>> = (0..n_tones)
            .map(|n| {
                layout.is_data[n].then(|| {
                    let h = channel.tone(n);
                    let mut flat = Vec::with_capacity(k_users * m_ant);
                    for k in 0..k_users {
                        for m in 0..m_ant {
                            flat.push(h[(k, m)]);
                        }
                    }
                    flat
                })
            })
            .collect();

        let frob_sq = 2.0
            * per_tone
                .iter()
                .map(|h| match h {
                    Some(h) => h.iter().map(|z| z.norm_sqr()).sum(),
                    None => m_ant as f64,
                })
                .sum::<f64>();

        let tw = twiddles(n_tones);
        let inv_sqrt_n = 1.0 / (n_tones as f64).sqrt();
        // |Re g| + |Im g| summed over one antenna's time samples
        let abs_row = |h: Complex64, n: usize| -> f64 {
            (0..n_tones)
                .map(|t| {
                    let g = h * tw[(n * t) % n_tones];
                    g.re.abs() + g.im.abs()
                })
                .sum::<f64>()
                * inv_sqrt_n
        };
        let mut inf_norm = 0.0f64;
        for (n, h) in per_tone.iter().enumerate() {
            match h {
                Some(h) => {
                    for k in 0..k_users {
                        let s: f64 = (0..m_ant).map(|m| abs_row(h[k * m_ant + m], n)).sum();
                        inf_norm = inf_norm.max(s);
                    }
                }
                None => inf_norm = inf_norm.max(abs_row(Complex64::new(1.0, 0.0), n)),
            }
        }

        // A Aᵀ is block diagonal: H_n H_nᴴ on data tones, identity on guard tones
        let mut spectral_sq = if layout.is_data.iter().all(|d| *d) {
            0.0
        } else {
            1.0
        };
        for n in 0..n_tones {
            if layout.is_data[n] {
                let h = channel.tone(n);
                let gram = h * h.adjoint();
                let top = gram
                    .symmetric_eigenvalues()
                    .iter()
                    .cloned()
                    .fold(0.0, f64::max);
                spectral_sq = f64::max(spectral_sq, top);
            }
        }

        let dense = match options.mode {
            OperatorMode::Dense => {
                let required = layout.rows().saturating_mul(layout.cols());
                if required > options.dense_budget {
                    return Err(Error::DenseBudgetExceeded {
                        required,
                        budget: options.dense_budget,
                    });
                }
                Some(build_dense(&layout, &per_tone, &tw))
            }
            OperatorMode::Fast => None,
        };

        Ok(ConstraintOperator {
            layout,
            mode: options.mode,
            variance: options.variance,
            channel: per_tone,
            dense,
            frob_sq,
            inf_norm,
            spectral_sq,
            dft: UnitaryDft::new(n_tones),
            fft: FftPlanner::new().plan_fft_forward(n_tones),
        })
    }

    pub fn mode(&self) -> OperatorMode {
        self.mode
    }

    pub fn variance_mode(&self) -> VarianceMode {
        self.variance
    }

    pub fn layout(&self) -> &StackLayout {
        &self.layout
    }

    pub fn dense_matrix(&self) -> Option<&DenseMatrix> {
        self.dense.as_ref()
    }

    fn fast_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let l = &self.layout;
        let (m_ant, n_tones, k_users) = (l.antennas, l.tones, l.users);
        let mut a = unstack_real(x)?;
        self.dft.forward_chunks(&mut a);
        let mut out = vec![Complex64::default(); l.complex_rows()];
        for n in 0..n_tones {
            let off = l.row_offset[n];
            match &self.channel[n] {
                Some(h) => {
                    for k in 0..k_users {
                        let hrow = &h[k * m_ant..(k + 1) * m_ant];
                        out[off + k] = hrow
                            .iter()
                            .enumerate()
                            .map(|(m, hk)| hk * a[m * n_tones + n])
                            .sum();
                    }
                }
                None => {
                    for m in 0..m_ant {
                        out[off + m] = a[m * n_tones + n];
                    }
                }
            }
        }
        Ok(stack_real(&out))
    }

    fn fast_adjoint(&self, r: &[f64]) -> Result<Vec<f64>> {
        let l = &self.layout;
        let (m_ant, n_tones, k_users) = (l.antennas, l.tones, l.users);
        let rho = unstack_real(r)?;
        let mut a = vec![Complex64::default(); m_ant * n_tones];
        for n in 0..n_tones {
            let off = l.row_offset[n];
            match &self.channel[n] {
                Some(h) => {
                    for k in 0..k_users {
                        let rk = rho[off + k];
                        for m in 0..m_ant {
                            a[m * n_tones + n] += h[k * m_ant + m].conj() * rk;
                        }
                    }
                }
                None => {
                    for m in 0..m_ant {
                        a[m * n_tones + n] = rho[off + m];
                    }
                }
            }
        }
        self.dft.inverse_chunks(&mut a);
        Ok(stack_real(&a))
    }

    /// Exact `(A⊙A)v` without forming `A`.
    ///
    /// With `g = h e^{-j2πnt/N} / √N`, `(Re g)² = (|g|² + Re g²) / 2` and
    /// `(Im g)² = (|g|² - Re g²) / 2`; the `g²` part carries the frequency
    /// `2n`, so it is one FFT per antenna.
    fn fast_squared_forward(&self, v: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let (m_ant, n_tones, k_users) = (l.antennas, l.tones, l.users);
        let half = m_ant * n_tones;
        let (v_re, v_im) = v.split_at(half);
        let mut level = vec![0.0; m_ant];
        let mut diff: Vec<Complex64> = v_re
            .iter()
            .zip(v_im)
            .map(|(a, b)| Complex64::new(a - b, 0.0))
            .collect();
        for m in 0..m_ant {
            level[m] = v_re[m * n_tones..(m + 1) * n_tones]
                .iter()
                .zip(&v_im[m * n_tones..(m + 1) * n_tones])
                .map(|(a, b)| a + b)
                .sum();
        }
        self.fft.process(&mut diff);
        let scale = 0.5 / n_tones as f64;
        let rows = l.complex_rows();
        let mut out = vec![0.0; 2 * rows];
        for n in 0..n_tones {
            let off = l.row_offset[n];
            let f = (2 * n) % n_tones;
            let mut put = |row: usize, p: f64, q: f64| {
                out[row] = ((p + q) * scale).max(0.0);
                out[rows + row] = ((p - q) * scale).max(0.0);
            };
            match &self.channel[n] {
                Some(h) => {
                    for k in 0..k_users {
                        let hrow = &h[k * m_ant..(k + 1) * m_ant];
                        let mut p = 0.0;
                        let mut q = Complex64::default();
                        for (m, hk) in hrow.iter().enumerate() {
                            p += hk.norm_sqr() * level[m];
                            q += hk * hk * diff[m * n_tones + f];
                        }
                        put(off + k, p, q.re);
                    }
                }
                None => {
                    for m in 0..m_ant {
                        put(off + m, level[m], diff[m * n_tones + f].re);
                    }
                }
            }
        }
        out
    }

    /// Exact `(A⊙A)ᵀu`, the transpose of [`Self::fast_squared_forward`].
    fn fast_squared_adjoint(&self, u: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let (m_ant, n_tones, k_users) = (l.antennas, l.tones, l.users);
        let rows = l.complex_rows();
        let (u_re, u_im) = u.split_at(rows);
        let mut level = vec![0.0; m_ant];
        // folded onto frequency 2n mod N, per antenna
        let mut folded = vec![Complex64::default(); m_ant * n_tones];
        for n in 0..n_tones {
            let off = l.row_offset[n];
            let f = (2 * n) % n_tones;
            match &self.channel[n] {
                Some(h) => {
                    for k in 0..k_users {
                        let sum = u_re[off + k] + u_im[off + k];
                        let dif = u_re[off + k] - u_im[off + k];
                        for m in 0..m_ant {
                            let hk = h[k * m_ant + m];
                            level[m] += hk.norm_sqr() * sum;
                            folded[m * n_tones + f] += hk * hk * dif;
                        }
                    }
                }
                None => {
                    for m in 0..m_ant {
                        level[m] += u_re[off + m] + u_im[off + m];
                        folded[m * n_tones + f] += u_re[off + m] - u_im[off + m];
                    }
                }
            }
        }
        self.fft.process(&mut folded);
        let scale = 0.5 / n_tones as f64;
        let half = m_ant * n_tones;
        let mut out = vec![0.0; 2 * half];
        for m in 0..m_ant {
            for t in 0..n_tones {
                let c = m * n_tones + t;
                let q = folded[c].re;
                out[c] = ((level[m] + q) * scale).max(0.0);
                out[half + c] = ((level[m] - q) * scale).max(0.0);
            }
        }
        out
    }
}

fn build_dense(
    layout: &StackLayout,
    per_tone: &[Option<Vec<Complex64>>],
    tw: &[Complex64],
) -> DenseMatrix {
    let (m_ant, n_tones, k_users) = (layout.antennas, layout.tones, layout.users);
    let rows = layout.complex_rows();
    let cols = layout.complex_cols();
    let (jr, ic) = (2 * rows, 2 * cols);
    let mut data = vec![0.0; jr * ic];
    let inv_sqrt_n = 1.0 / (n_tones as f64).sqrt();
    let mut fill = |row: usize, m: usize, h: Complex64, n: usize| {
        for t in 0..n_tones {
            let g = h * tw[(n * t) % n_tones] * inv_sqrt_n;
            let c = layout.col(m, t);
            data[row * ic + c] = g.re;
            data[row * ic + cols + c] = -g.im;
            data[(rows + row) * ic + c] = g.im;
            data[(rows + row) * ic + cols + c] = g.re;
        }
    };
    for n in 0..n_tones {
        let off = layout.row_offset[n];
        match &per_tone[n] {
            Some(h) => {
                for k in 0..k_users {
                    for m in 0..m_ant {
                        fill(off + k, m, h[k * m_ant + m], n);
                    }
                }
            }
            None => {
                for m in 0..m_ant {
                    fill(off + m, m, Complex64::new(1.0, 0.0), n);
                }
            }
        }
    }
    DenseMatrix {
        rows: jr,
        cols: ic,
        data,
    }
}

impl LinearOperator for ConstraintOperator {
    fn rows(&self) -> usize {
        self.layout.rows()
    }

    fn cols(&self) -> usize {
        self.layout.cols()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("apply input", self.cols(), x.len())?;
        match &self.dense {
            Some(d) => d.apply(x),
            None => self.fast_apply(x),
        }
    }

    fn apply_adjoint(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_len("adjoint input", self.rows(), r.len())?;
        match &self.dense {
            Some(d) => d.apply_adjoint(r),
            None => self.fast_adjoint(r),
        }
    }

    fn apply_squared(&self, v: &[f64], direction: Direction) -> Result<SquaredProduct> {
        let expected = match direction {
            Direction::Forward => self.cols(),
            Direction::Adjoint => self.rows(),
        };
        check_len("squared input", expected, v.len())?;
        check_nonnegative(v)?;
        if let Some(d) = &self.dense {
            return d.apply_squared(v, direction);
        }
        Ok(match self.variance {
            VarianceMode::Exact => SquaredProduct {
                values: match direction {
                    Direction::Forward => self.fast_squared_forward(v),
                    Direction::Adjoint => self.fast_squared_adjoint(v),
                },
                exact: true,
            },
            VarianceMode::Scalar => SquaredProduct {
                values: scalar_variance_product(
                    self.frob_sq,
                    self.rows(),
                    self.cols(),
                    v,
                    direction,
                ),
                exact: false,
            },
        })
    }

    fn frob_sq(&self) -> f64 {
        self.frob_sq
    }

    fn inf_norm(&self) -> f64 {
        self.inf_norm
    }

    fn spectral_norm_sq(&self) -> Option<f64> {
        Some(self.spectral_sq)
    }
}

/// `c · diag(w) · A` for a borrowed operator `A`.
///
/// With row weights the induced ∞-norm is reported as the upper bound
/// `c · max(w) · ‖A‖∞`.
pub struct Rescaled<'a, A: ?Sized> {
    inner: &'a A,
    factor: f64,
    weights: Option<Vec<f64>>,
    frob_sq: f64,
}

impl<'a, A: LinearOperator + ?Sized> Rescaled<'a, A> {
    pub fn new(inner: &'a A, factor: f64, weights: Option<Vec<f64>>) -> Result<Self> {
        let frob_sq = match &weights {
            None => factor * factor * inner.frob_sq(),
            Some(w) => {
                check_len("row weights", inner.rows(), w.len())?;
                let rows = inner.apply_squared(&vec![1.0; inner.cols()], Direction::Forward)?;
                factor
                    * factor
                    * rows
                        .values
                        .iter()
                        .zip(w)
                        .map(|(r, w)| r * w * w)
                        .sum::<f64>()
            }
        };
        Ok(Rescaled {
            inner,
            factor,
            weights,
            frob_sq,
        })
    }

    /// Weights `ρ/‖a_j‖` that give every nonzero row of `A` the root mean
    /// square row norm `ρ`; the weights do not change when `A` is scaled.
    pub fn equal_row_weights(inner: &A) -> Result<Vec<f64>> {
        let rows = inner.apply_squared(&vec![1.0; inner.cols()], Direction::Forward)?;
        let rms = (rows.values.iter().sum::<f64>() / rows.values.len().max(1) as f64).sqrt();
        Ok(rows
            .values
            .iter()
            .map(|r| if *r > 0.0 { rms / r.sqrt() } else { 1.0 })
            .collect())
    }

    /// Same row weights with column factor `factor`.
    pub fn with_factor(mut self, factor: f64) -> Self {
        self.frob_sq *= (factor / self.factor).powi(2);
        self.factor = factor;
        self
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    fn scale_rows(&self, mut v: Vec<f64>, power: i32) -> Vec<f64> {
        let c = self.factor.powi(power);
        match &self.weights {
            Some(w) => v
                .iter_mut()
                .zip(w)
                .for_each(|(x, w)| *x *= c * w.powi(power)),
            None => v.iter_mut().for_each(|x| *x *= c),
        }
        v
    }

    /// `w ⊙ v`, or `v` unchanged without weights.
    pub fn weigh_rows(&self, v: &[f64]) -> Vec<f64> {
        self.weigh_only(v, 1)
    }

    fn weigh_only(&self, v: &[f64], power: i32) -> Vec<f64> {
        match &self.weights {
            Some(w) => v.iter().zip(w).map(|(x, w)| x * w.powi(power)).collect(),
            None => v.to_vec(),
        }
    }
}

impl<A: LinearOperator + ?Sized> LinearOperator for Rescaled<'_, A> {
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.scale_rows(self.inner.apply(x)?, 1))
    }

    fn apply_adjoint(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_len("adjoint input", self.rows(), r.len())?;
        let mut out = self.inner.apply_adjoint(&self.weigh_only(r, 1))?;
        out.iter_mut().for_each(|v| *v *= self.factor);
        Ok(out)
    }

    fn apply_squared(&self, v: &[f64], direction: Direction) -> Result<SquaredProduct> {
        let f2 = self.factor * self.factor;
        match direction {
            Direction::Forward => {
                let mut out = self.inner.apply_squared(v, direction)?;
                out.values = self.scale_rows(out.values, 2);
                Ok(out)
            }
            Direction::Adjoint => {
                check_len("squared adjoint input", self.rows(), v.len())?;
                let mut out = self
                    .inner
                    .apply_squared(&self.weigh_only(v, 2), direction)?;
                out.values.iter_mut().for_each(|x| *x *= f2);
                Ok(out)
            }
        }
    }

    fn frob_sq(&self) -> f64 {
        self.frob_sq
    }

    fn inf_norm(&self) -> f64 {
        let w_max = self
            .weights
            .as_ref()
            .map_or(1.0, |w| w.iter().fold(0.0, |m: f64, x| m.max(x.abs())));
        self.factor.abs() * w_max * self.inner.inf_norm()
    }

    fn spectral_norm_sq(&self) -> Option<f64> {
        match self.weights {
            None => self
                .inner
                .spectral_norm_sq()
                .map(|s| s * self.factor * self.factor),
            Some(_) => None,
        }
    }
}

/// `⟨a, b⟩`.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_taps, freq_response};
    use crate::model::{dft_frame, TimeFrame};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(
        m: usize,
        k: usize,
        n: usize,
        data: usize,
        d: usize,
        seed: u64,
    ) -> (SystemConfig, FreqChannel) {
        let cfg = SystemConfig::centered(m, k, n, data, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = draw_taps(k, m, d, &mut rng).unwrap();
        (cfg, freq_response(&taps, n).unwrap())
    }

    fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den.max(1e-300)).sqrt()
    }

    #[test]
    fn single_antenna_full_band_matches_per_tone_evaluation() {
        // K = 1 < M is required by validation, so use M = 2 with a zero second column
        let n_tones = 8;
        let mut cfg = SystemConfig::centered(2, 1, n_tones, n_tones, 1).unwrap();
        cfg.data_tones = (0..n_tones).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let taps = draw_taps(1, 2, 2, &mut rng).unwrap();
        let ch = freq_response(&taps, n_tones).unwrap();
        let op = ConstraintOperator::build(&ch, &cfg, OperatorOptions::fast(VarianceMode::Exact))
            .unwrap();
        let x = random_vec(cfg.cols(), &mut rng);
        let y = unstack_real(&op.apply(&x).unwrap()).unwrap();
        let frame = TimeFrame::from_real_stack(2, n_tones, &x).unwrap();
        let a = dft_frame(&frame);
        for n in 0..n_tones {
            let h = ch.tone(n);
            let expect = h[(0, 0)] * a.antenna(0)[n] + h[(0, 1)] * a.antenna(1)[n];
            assert!((y[n] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn spectral_norm_matches_dense_svd() {
        for (m, k, guard_heavy) in [(6, 2, false), (3, 2, true)] {
            let data = if guard_heavy { 4 } else { 12 };
            let (cfg, ch) = setup(m, k, 16, data, 3, 8);
            let op = ConstraintOperator::build(&ch, &cfg, OperatorOptions::dense()).unwrap();
            let d = op.dense_matrix().unwrap();
            let mat = nalgebra::DMatrix::from_row_slice(d.rows, d.cols, d.as_slice());
            let top = mat.singular_values().max();
            let exact = op.spectral_norm_sq().unwrap();
            assert!(
                (exact - top * top).abs() < 1e-10 * exact,
                "{exact} vs {}",
                top * top
            );
        }
    }

    #[test]
    fn guard_rows_echo_the_precoded_values() {
        let (cfg, ch) = setup(4, 2, 16, 10, 3, 1);
        let op = ConstraintOperator::build(&ch, &cfg, OperatorOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_vec(cfg.cols(), &mut rng);
        let y = unstack_real(&op.apply(&x).unwrap()).unwrap();
        let w = dft_frame(&TimeFrame::from_real_stack(4, 16, &x).unwrap()).to_precoded();
        let l = cfg.layout();
        for n in cfg.guard_tones() {
            for m in 0..4 {
                assert!((y[l.row_offset[n] + m] - w.tone(n)[m]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_and_fast_agree() {
        let (cfg, ch) = setup(6, 2, 16, 12, 3, 5);
        let dense = ConstraintOperator::build(&ch, &cfg, OperatorOptions::dense()).unwrap();
        let fast = ConstraintOperator::build(&ch, &cfg, OperatorOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x = random_vec(cfg.cols(), &mut rng);
            let r = random_vec(cfg.rows(), &mut rng);
            assert!(rel_err(&fast.apply(&x).unwrap(), &dense.apply(&x).unwrap()) < 1e-10);
            assert!(
                rel_err(
                    &fast.apply_adjoint(&r).unwrap(),
                    &dense.apply_adjoint(&r).unwrap()
                ) < 1e-10
            );
        }
        assert!((dense.frob_sq() - fast.frob_sq()).abs() < 1e-10 * dense.frob_sq());
        let dm = dense.dense_matrix().unwrap();
        assert!((dm.frob_sq() - fast.frob_sq()).abs() < 1e-10 * dense.frob_sq());
        assert!((dm.inf_norm() - fast.inf_norm()).abs() < 1e-10 * dense.inf_norm());
    }

    #[test]
    fn exact_fast_squares_match_dense() {
        let (cfg, ch) = setup(5, 2, 16, 11, 4, 8);
        let dense = ConstraintOperator::build(&ch, &cfg, OperatorOptions::dense()).unwrap();
        let fast = ConstraintOperator::build(&ch, &cfg, OperatorOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v: Vec<f64> = (0..cfg.cols())
                .map(|_| rng.random_range(0.0..2.0))
                .collect();
            let u: Vec<f64> = (0..cfg.rows())
                .map(|_| rng.random_range(0.0..2.0))
                .collect();
            let f = fast.apply_squared(&v, Direction::Forward).unwrap();
            assert!(f.exact);
            let d = dense.apply_squared(&v, Direction::Forward).unwrap();
            assert!(rel_err(&f.values, &d.values) < 1e-12);
            let f = fast.apply_squared(&u, Direction::Adjoint).unwrap();
            let d = dense.apply_squared(&u, Direction::Adjoint).unwrap();
            assert!(rel_err(&f.values, &d.values) < 1e-12);
        }
    }

    #[test]
    fn odd_tone_count_squares_match_dense() {
        // 2n mod N folds differently when N is odd
        let (cfg, ch) = setup(5, 1, 9, 7, 2, 12);
        let dense = ConstraintOperator::build(&ch, &cfg, OperatorOptions::dense()).unwrap();
        let fast = ConstraintOperator::build(&ch, &cfg, OperatorOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v: Vec<f64> = (0..cfg.cols())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let u: Vec<f64> = (0..cfg.rows())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let f = fast.apply_squared(&v, Direction::Forward).unwrap().values;
        let d = dense.apply_squared(&v, Direction::Forward).unwrap().values;
        assert!(rel_err(&f, &d) < 1e-12);
        let f = fast.apply_squared(&u, Direction::Adjoint).unwrap().values;
        let d = dense.apply_squared(&u, Direction::Adjoint).unwrap().values;
        assert!(rel_err(&f, &d) < 1e-12);
    }

    #[test]
    fn adjoint_identity_both_modes() {
        let (cfg, ch) = setup(8, 3, 32, 24, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for opts in [OperatorOptions::dense(), OperatorOptions::default()] {
            let op = ConstraintOperator::build(&ch, &cfg, opts).unwrap();
            for _ in 0..10 {
                let x = random_vec(cfg.cols(), &mut rng);
                let r = random_vec(cfg.rows(), &mut rng);
                let lhs = dot(&op.apply(&x).unwrap(), &r);
                let rhs = dot(&x, &op.apply_adjoint(&r).unwrap());
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
            }
            assert!(op
                .apply(&vec![0.0; cfg.cols()])
                .unwrap()
                .iter()
                .all(|v| *v == 0.0));
            assert!(op
                .apply_adjoint(&vec![0.0; cfg.rows()])
                .unwrap()
                .iter()
                .all(|v| *v == 0.0));
        }
    }

    #[test]
    fn linearity_and_inf_norm_bound() {
        let (cfg, ch) = setup(8, 2, 16, 12, 3, 14);
        let op = ConstraintOperator::build(&ch, &cfg, OperatorOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let x1 = random_vec(cfg.cols(), &mut rng);
            let x2 = random_vec(cfg.cols(), &mut rng);
            let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
            let y1 = op.apply(&x1).unwrap();
            let y2 = op.apply(&x2).unwrap();
            let ys = op.apply(&sum).unwrap();
            for j in 0..ys.len() {
                assert!((ys[j] - y1[j] - y2[j]).abs() < 1e-12 * (1.0 + ys[j].abs()));
            }
            assert!(norm_inf(&y1) <= op.inf_norm() * norm_inf(&x1) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn dense_budget_is_enforced() {
        let (cfg, ch) = setup(8, 2, 16, 12, 3, 1);
        let opts = OperatorOptions {
            dense_budget: 100,
            ..OperatorOptions::dense()
        };
        assert!(matches!(
            ConstraintOperator::build(&ch, &cfg, opts),
            Err(Error::DenseBudgetExceeded { .. })
        ));
    }

    #[test]
    fn length_and_sign_errors() {
        let (cfg, ch) = setup(4, 1, 8, 6, 2, 1);
        let op = ConstraintOperator::build(&ch, &cfg, OperatorOptions::default()).unwrap();
        assert!(op.apply(&[1.0; 3]).is_err());
        assert!(op.apply_adjoint(&[1.0; 3]).is_err());
        let mut v = vec![1.0; cfg.cols()];
        v[4] = -1.0;
        assert!(matches!(
            op.apply_squared(&v, Direction::Forward),
            Err(Error::NegativeVariance { index: 4, .. })
        ));
    }

    #[test]
    fn squared_identity() {
        let eye = DenseMatrix::identity(2);
        let out = eye.apply_squared(&[3.0, 5.0], Direction::Forward).unwrap();
        assert_eq!(out.values, vec![3.0, 5.0]);
    }

    #[test]
    fn rescaled_matches_explicit_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (r, c) = (5, 8);
        let a = DenseMatrix::new(r, c, random_vec(r * c, &mut rng)).unwrap();
        let w: Vec<f64> = (0..r).map(|_| rng.random_range(0.5..3.0)).collect();
        let f = 0.7;
        let explicit: Vec<f64> = (0..r * c).map(|k| f * w[k / c] * a.as_slice()[k]).collect();
        let b = DenseMatrix::new(r, c, explicit).unwrap();
        let op = Rescaled::new(&a, f, Some(w.clone())).unwrap();
        let x = random_vec(c, &mut rng);
        let u = random_vec(r, &mut rng);
        let pos: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        let upos: Vec<f64> = u.iter().map(|v| v.abs()).collect();
        assert!(rel_err(&op.apply(&x).unwrap(), &b.apply(&x).unwrap()) < 1e-14);
        assert!(
            rel_err(
                &op.apply_adjoint(&u).unwrap(),
                &b.apply_adjoint(&u).unwrap()
            ) < 1e-14
        );
        let fwd = op.apply_squared(&pos, Direction::Forward).unwrap().values;
        assert!(
            rel_err(
                &fwd,
                &b.apply_squared(&pos, Direction::Forward).unwrap().values
            ) < 1e-14
        );
        let adj = op.apply_squared(&upos, Direction::Adjoint).unwrap().values;
        assert!(
            rel_err(
                &adj,
                &b.apply_squared(&upos, Direction::Adjoint).unwrap().values
            ) < 1e-14
        );
        assert!((op.frob_sq() - b.frob_sq()).abs() < 1e-12 * b.frob_sq());
        assert!(op.inf_norm() >= b.inf_norm() * (1.0 - 1e-12));
        assert!(op.spectral_norm_sq().is_none());
        let g = Rescaled::new(&a, 1.0, Some(w)).unwrap().with_factor(f);
        assert!((g.frob_sq() - b.frob_sq()).abs() < 1e-12 * b.frob_sq());
    }

    #[test]
    fn equal_row_weights_keep_frobenius_norm() {
        let (cfg, ch) = setup(4, 2, 16, 12, 3, 8);
        let op = ConstraintOperator::build(&ch, &cfg, OperatorOptions::default()).unwrap();
        let w = Rescaled::equal_row_weights(&op).unwrap();
        let eq = Rescaled::new(&op, 1.0, Some(w)).unwrap();
        let rows = eq
            .apply_squared(&vec![1.0; eq.cols()], Direction::Forward)
            .unwrap()
            .values;
        let target = op.frob_sq() / op.rows() as f64;
        assert!(rows.iter().all(|r| (r - target).abs() < 1e-12 * target));
        assert!((eq.frob_sq() - op.frob_sq()).abs() < 1e-9 * op.frob_sq());
        let plain = Rescaled::new(&op, 2.0, None).unwrap();
        let s = op.spectral_norm_sq().unwrap();
        assert!((plain.spectral_norm_sq().unwrap() - 4.0 * s).abs() < 1e-12 * s);
    }

    #[test]
    fn dense_squares_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = DenseMatrix::new(6, 10, random_vec(60, &mut rng)).unwrap();
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let u: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let fwd = a.apply_squared(&v, Direction::Forward).unwrap().values;
        let adj = a.apply_squared(&u, Direction::Adjoint).unwrap().values;
        for r in 0..6 {
            let mut s = 0.0;
            for c in 0..10 {
                s += a.get(r, c).powi(2) * v[c];
            }
            assert!((fwd[r] - s).abs() < 1e-12);
        }
        for c in 0..10 {
            let mut s = 0.0;
            for r in 0..6 {
                s += a.get(r, c).powi(2) * u[r];
            }
            assert!((adj[c] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_variance_concentrates_on_iid_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (rows, cols) = (40, 2000);
        let a = DenseMatrix::new(rows, cols, random_vec(rows * cols, &mut rng)).unwrap();
        let v = vec![0.7; cols];
        let exact = a.apply_squared(&v, Direction::Forward).unwrap().values;
        let approx = scalar_variance_product(a.frob_sq(), rows, cols, &v, Direction::Forward);
        for (e, s) in exact.iter().zip(&approx) {
            assert!((e - s).abs() <= 0.1 * e, "{e} vs {s}");
        }
        let u = vec![1.3; rows];
        let approx = scalar_variance_product(a.frob_sq(), rows, cols, &u, Direction::Adjoint);
        let exact = a.apply_squared(&u, Direction::Adjoint).unwrap().values;
        let mean_e: f64 = exact.iter().sum::<f64>() / cols as f64;
        assert!((mean_e - approx[0]).abs() < 1e-9 * mean_e);
    }

    #[test]
    fn scalar_mode_is_flagged_inexact() {
        let (cfg, ch) = setup(4, 1, 8, 6, 2, 1);
        let op = ConstraintOperator::build(&ch, &cfg, OperatorOptions::fast(VarianceMode::Scalar))
            .unwrap();
        let out = op
            .apply_squared(&vec![1.0; cfg.cols()], Direction::Forward)
            .unwrap();
        assert!(!out.exact);
        assert_eq!(out.values.len(), cfg.rows());
    }
}
