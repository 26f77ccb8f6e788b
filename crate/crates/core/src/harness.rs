//! Experiment driver: seeded Monte-Carlo trials over a list of solvers,
//! aggregation into CCDF, summary, trace and SER tables, and file output.
//!
//! Every trial draws its channel and symbols from a ChaCha stream keyed on
//! `(seed, trial)`, so results do not depend on the worker count and a run
//! with more trials extends a shorter one.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{clip, fitra_with, zf_precode, FitraConfig, DEFAULT_CLIP_RATIO};
use crate::channel::{draw_taps, freq_response, FreqChannel};
use crate::emtgm::{solve_with, Hyperparams};
use crate::error::{Error, Result};
use crate::linops::{ConstraintOperator, OperatorOptions};
use crate::metrics::{
    antenna_paprs, ccdf, ccdf_quantile, db, mean_db, mui_linear, obr_linear, ser_simulate,
    threshold_grid, SerCount, TrialRecord,
};
use crate::model::{
    generate_symbols, measurement, precoded_to_time, time_to_precoded, SymbolFrame, SystemConfig,
    TimeFrame,
};

/// Offset between the seed of the channel streams and the seed of the SER
/// noise streams.
const SER_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// One solver entry of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverSpec {
    Zf,
    Clipping {
        #[serde(default = "default_clip_ratio")]
        ratio: f64,
    },
    Fitra {
        #[serde(default)]
        params: FitraConfig,
        #[serde(default)]
        operator: OperatorOptions,
        /// Run only on the first `max_trials` trials.
        #[serde(default)]
        max_trials: Option<usize>,
    },
    EmTgmGamp {
        #[serde(default)]
        params: Hyperparams,
        #[serde(default)]
        operator: OperatorOptions,
        #[serde(default)]
        max_trials: Option<usize>,
    },
}

fn default_clip_ratio() -> f64 {
    DEFAULT_CLIP_RATIO
}

impl SolverSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SolverSpec::Zf => "zf",
            SolverSpec::Clipping { .. } => "clipping",
            SolverSpec::Fitra { .. } => "fitra",
            SolverSpec::EmTgmGamp { .. } => "em_tgm_gamp",
        }
    }

    fn max_trials(&self) -> Option<usize> {
        match self {
            SolverSpec::Fitra { max_trials, .. } | SolverSpec::EmTgmGamp { max_trials, .. } => {
                *max_trials
            }
            _ => None,
        }
    }

    fn runs_on(&self, trial: usize) -> bool {
        self.max_trials().is_none_or(|m| trial < m)
    }

    fn validate(&self) -> Result<()> {
        match self {
            SolverSpec::Zf => Ok(()),
            SolverSpec::Clipping { ratio } if *ratio > 0.0 => Ok(()),
            SolverSpec::Clipping { ratio } => Err(Error::InvalidConfig(format!(
                "clipping ratio must be positive, got {ratio}"
            ))),
            SolverSpec::Fitra { params, .. } => params.validate(),
            SolverSpec::EmTgmGamp { params, .. } => params.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SerConfig {
    pub snr_db: Vec<f64>,
    /// Noise realizations per channel trial and SNR point.
    pub draws: usize,
    /// Simulate SER on the first `max_trials` trials only.
    pub max_trials: Option<usize>,
}

impl Default for SerConfig {
    fn default() -> Self {
        SerConfig {
            snr_db: Vec::new(),
            draws: 100,
            max_trials: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcdfGrid {
    pub lo_db: f64,
    pub hi_db: f64,
    pub step_db: f64,
}

impl Default for CcdfGrid {
    fn default() -> Self {
        CcdfGrid {
            lo_db: 0.0,
            hi_db: 14.0,
            step_db: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("results"),
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// System dimensions; `system.seed` is the master seed.
    pub system: SystemConfig,
    pub solvers: Vec<SolverSpec>,
    pub trials: usize,
    #[serde(default)]
    pub ser: Option<SerConfig>,
    /// Record PAPR/MUI/OBR every `trace_stride` iterations of the iterative
    /// solvers; `None` records no traces.
    #[serde(default)]
    pub trace_stride: Option<usize>,
    #[serde(default)]
    pub ccdf: CcdfGrid,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.trials == 0 {
            return Err(Error::InvalidConfig(
                "at least one trial is required".into(),
            ));
        }
        if self.solvers.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one solver is required".into(),
            ));
        }
        for (i, s) in self.solvers.iter().enumerate() {
            s.validate()?;
            if self.solvers[..i].iter().any(|p| p.name() == s.name()) {
                return Err(Error::InvalidConfig(format!(
                    "solver `{}` listed twice",
                    s.name()
                )));
            }
        }
        if self.trace_stride == Some(0) {
            return Err(Error::InvalidConfig("trace_stride must be positive".into()));
        }
        let g = &self.ccdf;
        if !(g.step_db > 0.0) || !(g.hi_db >= g.lo_db) {
            return Err(Error::InvalidConfig(
                "CCDF grid needs step > 0 and hi >= lo".into(),
            ));
        }
        if let Some(ser) = &self.ser {
            if ser.draws == 0 || ser.snr_db.iter().any(|s| !s.is_finite()) {
                return Err(Error::InvalidConfig(
                    "SER needs at least one draw and finite SNR points".into(),
                ));
            }
        }
        Ok(())
    }

    /// Keeps only the named solvers, in configuration order.
    pub fn select_solvers(&mut self, names: &[String]) -> Result<()> {
        if let Some(bad) = names
            .iter()
            .find(|n| !self.solvers.iter().any(|s| s.name() == *n))
        {
            return Err(Error::InvalidConfig(format!(
                "solver `{bad}` is not configured"
            )));
        }
        self.solvers.retain(|s| names.iter().any(|n| n == s.name()));
        self.validate()
    }
}

/// PAPR, MUI and OBR of the current iterate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    /// Antenna-averaged PAPR, dB.
    pub papr_db: f64,
    pub mui_db: f64,
    pub obr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub trial: usize,
    pub solver: String,
    pub points: Vec<TracePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub solver: String,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    /// Ordered by trial, then by solver position in the configuration.
    pub records: Vec<TrialRecord>,
    pub traces: Vec<SolverTrace>,
    pub failures: Vec<TrialFailure>,
}

/// Channel stream for `trial`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Noise stream for `trial` and SNR point `point`, shared by all solvers.
fn ser_rng(seed: u64, trial: usize, point: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(SER_SEED_OFFSET));
    rng.set_stream(((trial as u64) << 16) | point as u64);
    rng
}

/// Channel and symbols of one trial.
pub struct TrialInstance {
    pub channel: FreqChannel,
    pub symbols: SymbolFrame,
    pub y: Vec<f64>,
}

pub fn draw_instance(cfg: &SystemConfig, trial: usize) -> Result<TrialInstance> {
    let mut rng = trial_rng(cfg.seed, trial);
    let taps = draw_taps(cfg.users, cfg.antennas, cfg.taps, &mut rng)?;
    let channel = freq_response(&taps, cfg.tones)?;
    let symbols = generate_symbols(cfg, &mut rng);
    let y = measurement(cfg, &symbols)?;
    Ok(TrialInstance {
        channel,
        symbols,
        y,
    })
}

struct FrameMetrics {
    papr_db: Vec<f64>,
    mui_db: f64,
    obr_db: f64,
}

fn frame_metrics(
    cfg: &SystemConfig,
    inst: &TrialInstance,
    frame: &TimeFrame,
) -> Result<FrameMetrics> {
    let w = time_to_precoded(frame);
    let obr_db = if cfg.num_guard() == 0 {
        f64::NAN
    } else {
        db(obr_linear(cfg, &w)?)
    };
    Ok(FrameMetrics {
        papr_db: antenna_paprs(frame, cfg.oversample)?,
        mui_db: db(mui_linear(cfg, &inst.symbols, &w, &inst.channel)?),
        obr_db,
    })
}

struct Tracer<'a> {
    cfg: &'a SystemConfig,
    inst: &'a TrialInstance,
    stride: Option<usize>,
    points: Vec<TracePoint>,
    error: Option<Error>,
}

impl Tracer<'_> {
    fn observe(&mut self, iteration: usize, last: usize, x: &[f64]) {
        let Some(stride) = self.stride else { return };
        if self.error.is_some() || !(iteration.is_multiple_of(stride) || iteration == last) {
            return;
        }
        let point = TimeFrame::from_real_stack(self.cfg.antennas, self.cfg.tones, x)
            .and_then(|f| frame_metrics(self.cfg, self.inst, &f));
        match point {
            Ok(m) => self.points.push(TracePoint {
                iteration,
                papr_db: mean_db(&m.papr_db),
                mui_db: m.mui_db,
                obr_db: m.obr_db,
            }),
            Err(e) => self.error = Some(e),
        }
    }

    fn finish(self) -> Result<Vec<TracePoint>> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.points),
        }
    }
}

struct SolverRun {
    x: Vec<f64>,
    iterations: usize,
    boundary_fraction: Option<f64>,
    trace: Vec<TracePoint>,
}

fn build_operator(
    cfg: &SystemConfig,
    inst: &TrialInstance,
    options: OperatorOptions,
) -> Result<ConstraintOperator> {
    ConstraintOperator::build(&inst.channel, cfg, options)
}

fn run_solver(
    spec: &SolverSpec,
    cfg: &SystemConfig,
    inst: &TrialInstance,
    stride: Option<usize>,
) -> Result<SolverRun> {
    let mut tracer = Tracer {
        cfg,
        inst,
        stride,
        points: Vec::new(),
        error: None,
    };
    match spec {
        SolverSpec::Zf => {
            let w = zf_precode(&inst.channel, &inst.symbols, cfg)?;
            Ok(SolverRun {
                x: precoded_to_time(&w).to_real_stack(),
                iterations: 0,
                boundary_fraction: None,
                trace: Vec::new(),
            })
        }
        SolverSpec::Clipping { ratio } => {
            let w = zf_precode(&inst.channel, &inst.symbols, cfg)?;
            let clipped = clip(&precoded_to_time(&w), *ratio)?;
            Ok(SolverRun {
                x: clipped.to_real_stack(),
                iterations: 0,
                boundary_fraction: None,
                trace: Vec::new(),
            })
        }
        SolverSpec::Fitra {
            params, operator, ..
        } => {
            let op = build_operator(cfg, inst, *operator)?;
            let last = params.max_iters;
            let out = fitra_with(&inst.y, &op, params, |it, x| tracer.observe(it, last, x))?;
            Ok(SolverRun {
                x: out.x,
                iterations: out.iterations,
                boundary_fraction: None,
                trace: tracer.finish()?,
            })
        }
        SolverSpec::EmTgmGamp {
            params, operator, ..
        } => {
            let op = build_operator(cfg, inst, *operator)?;
            let last = params.max_iters;
            let out = solve_with(&inst.y, &op, params, |rec, x| {
                tracer.observe(rec.iteration, last, x)
            })?;
            Ok(SolverRun {
                boundary_fraction: Some(out.final_boundary_fraction()),
                iterations: out.iterations,
                x: out.x,
                trace: tracer.finish()?,
            })
        }
    }
}

#[derive(Default)]
struct TrialOutcome {
    records: Vec<TrialRecord>,
    traces: Vec<SolverTrace>,
    failures: Vec<TrialFailure>,
}

fn run_trial(cfg: &ExperimentConfig, trial: usize) -> TrialOutcome {
    let sys = &cfg.system;
    let mut outcome = TrialOutcome::default();
    let inst = match draw_instance(sys, trial) {
        Ok(i) => i,
        Err(e) => {
            outcome.failures.push(TrialFailure {
                trial,
                solver: "setup".into(),
                error: e.to_string(),
            });
            return outcome;
        }
    };
    for spec in cfg.solvers.iter().filter(|s| s.runs_on(trial)) {
        let name = spec.name();
        let fail = |e: Error| TrialFailure {
            trial,
            solver: name.into(),
            error: e.to_string(),
        };
        let start = Instant::now();
        let run = match run_solver(spec, sys, &inst, cfg.trace_stride) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("trial {trial}, solver {name}: {e}");
                outcome.failures.push(fail(e));
                continue;
            }
        };
        let wall_time_s = start.elapsed().as_secs_f64();
        let measured = TimeFrame::from_real_stack(sys.antennas, sys.tones, &run.x)
            .and_then(|f| frame_metrics(sys, &inst, &f))
            .and_then(|m| Ok((m, simulate_ser(cfg, trial, &inst, &run.x)?)));
        let (m, ser) = match measured {
            Ok(v) => v,
            Err(e) => {
                outcome.failures.push(fail(e));
                continue;
            }
        };
        outcome.records.push(TrialRecord {
            trial,
            solver: name.into(),
            papr_db: m.papr_db,
            mui_db: m.mui_db,
            obr_db: m.obr_db,
            iterations: run.iterations,
            wall_time_s,
            boundary_fraction: run.boundary_fraction,
            ser,
        });
        if !run.trace.is_empty() {
            outcome.traces.push(SolverTrace {
                trial,
                solver: name.into(),
                points: run.trace,
            });
        }
    }
    outcome
}

fn simulate_ser(
    cfg: &ExperimentConfig,
    trial: usize,
    inst: &TrialInstance,
    x: &[f64],
) -> Result<Vec<(f64, SerCount)>> {
    let Some(ser) = &cfg.ser else {
        return Ok(Vec::new());
    };
    if ser.max_trials.is_some_and(|m| trial >= m) {
        return Ok(Vec::new());
    }
    ser.snr_db
        .iter()
        .enumerate()
        .map(|(p, &snr)| {
            let mut rng = ser_rng(cfg.system.seed, trial, p);
            let count = ser_simulate(
                x,
                &inst.symbols,
                &inst.channel,
                &cfg.system,
                snr,
                ser.draws,
                &mut rng,
            )?;
            Ok((snr, count))
        })
        .collect()
}

/// Runs every trial and solver. Solver failures are collected in
/// [`ExperimentResults::failures`] while the other records are kept.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let outcomes: Vec<TrialOutcome> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, t))
            .collect()
    });
    let mut results = ExperimentResults {
        config: cfg.clone(),
        records: Vec::new(),
        traces: Vec::new(),
        failures: Vec::new(),
    };
    for o in outcomes {
        results.records.extend(o.records);
        results.traces.extend(o.traces);
        results.failures.extend(o.failures);
    }
    Ok(results)
}

/// Mean of linear values given in dB, reported in dB; NaN entries are skipped.
fn mean_db_finite(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        mean_db(&v)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub solver: String,
    pub trials: usize,
    pub mean_papr_db: f64,
    /// Per-antenna PAPR exceeded with probability 1%.
    pub papr_1pct_db: f64,
    pub mean_mui_db: f64,
    pub mean_obr_db: f64,
    pub mean_iterations: f64,
    pub mean_boundary_fraction: Option<f64>,
    pub mean_wall_time_s: f64,
}

/// Exceedance probabilities per solver on a common threshold grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CcdfTable {
    pub thresholds_db: Vec<f64>,
    /// `(solver, probability per threshold)`.
    pub curves: Vec<(String, Vec<f64>)>,
}

/// Trace averaged over trials at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub solver: String,
    pub iteration: usize,
    pub papr_db: f64,
    pub mui_db: f64,
    pub obr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SerTable {
    pub snr_db: Vec<f64>,
    /// `(solver, pooled count per SNR point)`.
    pub curves: Vec<(String, Vec<SerCount>)>,
}

impl ExperimentResults {
    /// Solver names in configuration order.
    pub fn solver_names(&self) -> Vec<&'static str> {
        self.config.solvers.iter().map(|s| s.name()).collect()
    }

    pub fn records_for<'a>(&'a self, solver: &'a str) -> impl Iterator<Item = &'a TrialRecord> {
        self.records.iter().filter(move |r| r.solver == solver)
    }

    pub fn summary(&self) -> Vec<SolverSummary> {
        self.solver_names()
            .into_iter()
            .map(|name| {
                let recs: Vec<&TrialRecord> = self.records_for(name).collect();
                let samples: Vec<f64> = recs
                    .iter()
                    .flat_map(|r| r.papr_db.iter().copied())
                    .collect();
                let fractions: Vec<f64> = recs.iter().filter_map(|r| r.boundary_fraction).collect();
                SolverSummary {
                    solver: name.into(),
                    trials: recs.len(),
                    mean_papr_db: mean_db_finite(samples.iter().copied()),
                    papr_1pct_db: ccdf_quantile(&samples, 0.01).unwrap_or(f64::NAN),
                    mean_mui_db: mean_db_finite(recs.iter().map(|r| r.mui_db)),
                    mean_obr_db: mean_db_finite(recs.iter().map(|r| r.obr_db)),
                    mean_iterations: mean(recs.iter().map(|r| r.iterations as f64)),
                    mean_boundary_fraction: if fractions.is_empty() {
                        None
                    } else {
                        Some(mean(fractions.iter().copied()))
                    },
                    mean_wall_time_s: mean(recs.iter().map(|r| r.wall_time_s)),
                }
            })
            .collect()
    }

    /// CCDF of the per-antenna PAPR samples, or of the antenna-averaged
    /// PAPR per trial when `per_antenna` is false.
    pub fn ccdf_table(&self, per_antenna: bool) -> Result<CcdfTable> {
        let g = &self.config.ccdf;
        let thresholds_db = threshold_grid(g.lo_db, g.hi_db, g.step_db);
        let mut curves = Vec::new();
        for name in self.solver_names() {
            let samples: Vec<f64> = if per_antenna {
                self.records_for(name)
                    .flat_map(|r| r.papr_db.iter().copied())
                    .collect()
            } else {
                self.records_for(name).map(|r| r.mean_papr_db()).collect()
            };
            if samples.is_empty() {
                continue;
            }
            curves.push((name.to_string(), ccdf(&samples, &thresholds_db)?));
        }
        Ok(CcdfTable {
            thresholds_db,
            curves,
        })
    }

    /// Traces averaged over trials (linear domain), per solver and iteration.
    pub fn trace_table(&self) -> Vec<TraceRow> {
        let mut rows = Vec::new();
        for name in self.solver_names() {
            let traces: Vec<&SolverTrace> =
                self.traces.iter().filter(|t| t.solver == name).collect();
            let mut iterations: Vec<usize> = traces
                .iter()
                .flat_map(|t| t.points.iter().map(|p| p.iteration))
                .collect();
            iterations.sort_unstable();
            iterations.dedup();
            for it in iterations {
                let points: Vec<&TracePoint> = traces
                    .iter()
                    .filter_map(|t| t.points.iter().find(|p| p.iteration == it))
                    .collect();
                rows.push(TraceRow {
                    solver: name.into(),
                    iteration: it,
                    papr_db: mean_db_finite(points.iter().map(|p| p.papr_db)),
                    mui_db: mean_db_finite(points.iter().map(|p| p.mui_db)),
                    obr_db: mean_db_finite(points.iter().map(|p| p.obr_db)),
                });
            }
        }
        rows
    }

    /// Symbol errors pooled over trials, per solver and SNR point.
    pub fn ser_table(&self) -> SerTable {
        let snr_db = self
            .config
            .ser
            .as_ref()
            .map(|s| s.snr_db.clone())
            .unwrap_or_default();
        let mut curves = Vec::new();
        for name in self.solver_names() {
            let mut counts = vec![SerCount::default(); snr_db.len()];
            let mut any = false;
            for r in self.records_for(name) {
                for (i, (_, c)) in r.ser.iter().enumerate() {
                    counts[i].merge(*c);
                    any = true;
                }
            }
            if any {
                curves.push((name.to_string(), counts));
            }
        }
        SerTable { snr_db, curves }
    }

    /// The first failure as an error, if any solver aborted.
    pub fn first_failure(&self) -> Option<Error> {
        self.failures.first().map(|f| Error::Trial {
            trial: f.trial,
            solver: f.solver.clone(),
            source: Box::new(Error::InvalidConfig(f.error.clone())),
        })
    }
}

/// Decimal rendering used in every emitted table.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_wide(
    path: &Path,
    key: &str,
    keys: &[f64],
    curves: &[(String, Vec<String>)],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec![key.to_string()];
    header.extend(curves.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(csv_error)?;
    for (i, k) in keys.iter().enumerate() {
        let mut row = vec![fmt_f64(*k)];
        row.extend(curves.iter().map(|(_, c)| c[i].clone()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn write_ccdf(path: &Path, table: &CcdfTable) -> Result<()> {
    let curves: Vec<(String, Vec<String>)> = table
        .curves
        .iter()
        .map(|(n, c)| (n.clone(), c.iter().map(|p| fmt_f64(*p)).collect()))
        .collect();
    write_wide(path, "threshold_db", &table.thresholds_db, &curves)
}

/// Columns holding wall-clock measurements, which differ between runs.
pub const TIMING_COLUMNS: [&str; 2] = ["wall_time_s", "mean_wall_time_s"];

/// Writes the result tables into `dir`. Returns the paths written.
///
/// CSV output: `summary.csv`, `trials.csv`, `ccdf.csv` (per-antenna
/// samples), `ccdf_mean.csv` (antenna-averaged), plus `trace.csv` and
/// `ser.csv` when the run recorded traces or SER. JSON output:
/// `results.json` with the configuration and every record.
pub fn emit_results(
    results: &ExperimentResults,
    dir: &Path,
    formats: &[OutputFormat],
) -> Result<Vec<PathBuf>> {
    if results.records.is_empty() {
        return Err(Error::InvalidConfig("no trial records to emit".into()));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&OutputFormat::Csv) {
        let path = dir.join("summary.csv");
        let mut w = csv_writer(&path)?;
        w.write_record([
            "solver",
            "trials",
            "mean_papr_db",
            "papr_1pct_db",
            "mean_mui_db",
            "mean_obr_db",
            "mean_iterations",
            "mean_boundary_fraction",
            "mean_wall_time_s",
        ])
        .map_err(csv_error)?;
        for s in results.summary() {
            w.write_record([
                s.solver.clone(),
                s.trials.to_string(),
                fmt_f64(s.mean_papr_db),
                fmt_f64(s.papr_1pct_db),
                fmt_f64(s.mean_mui_db),
                fmt_f64(s.mean_obr_db),
                fmt_f64(s.mean_iterations),
                s.mean_boundary_fraction.map(fmt_f64).unwrap_or_default(),
                fmt_f64(s.mean_wall_time_s),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        written.push(path);

        let path = dir.join("trials.csv");
        let mut w = csv_writer(&path)?;
        w.write_record([
            "trial",
            "solver",
            "mean_papr_db",
            "max_papr_db",
            "mui_db",
            "obr_db",
            "iterations",
            "boundary_fraction",
            "wall_time_s",
        ])
        .map_err(csv_error)?;
        for r in &results.records {
            let max = r.papr_db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            w.write_record([
                r.trial.to_string(),
                r.solver.clone(),
                fmt_f64(r.mean_papr_db()),
                fmt_f64(max),
                fmt_f64(r.mui_db),
                fmt_f64(r.obr_db),
                r.iterations.to_string(),
                r.boundary_fraction.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.wall_time_s),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        written.push(path);

        let path = dir.join("ccdf.csv");
        write_ccdf(&path, &results.ccdf_table(true)?)?;
        written.push(path);
        let path = dir.join("ccdf_mean.csv");
        write_ccdf(&path, &results.ccdf_table(false)?)?;
        written.push(path);

        let trace = results.trace_table();
        if !trace.is_empty() {
            let path = dir.join("trace.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["solver", "iteration", "papr_db", "mui_db", "obr_db"])
                .map_err(csv_error)?;
            for r in trace {
                w.write_record([
                    r.solver,
                    r.iteration.to_string(),
                    fmt_f64(r.papr_db),
                    fmt_f64(r.mui_db),
                    fmt_f64(r.obr_db),
                ])
                .map_err(csv_error)?;
            }
            w.flush()?;
            written.push(path);
        }

        let ser = results.ser_table();
        if !ser.curves.is_empty() {
            let path = dir.join("ser.csv");
            let curves: Vec<(String, Vec<String>)> = ser
                .curves
                .iter()
                .map(|(n, c)| (n.clone(), c.iter().map(|c| fmt_f64(c.rate())).collect()))
                .collect();
            write_wide(&path, "snr_db", &ser.snr_db, &curves)?;
            written.push(path);
        }
    }
    if formats.contains(&OutputFormat::Json) {
        let path = dir.join("results.json");
        let json = serde_json::to_string_pretty(results)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        fs::write(&path, json)?;
        written.push(path);
    }
    Ok(written)
}

/// Summary of one solver at one antenna count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub antennas: usize,
    pub solver: String,
    pub trials: usize,
    pub mean_papr_db: f64,
    pub papr_1pct_db: f64,
    pub mean_mui_db: f64,
    pub mean_obr_db: f64,
}

/// Repeats the experiment for every antenna count, with traces and SER
/// turned off. Failures of any run are returned alongside the rows.
pub fn sweep_antennas(
    cfg: &ExperimentConfig,
    antennas: &[usize],
) -> Result<(Vec<SweepRow>, Vec<TrialFailure>)> {
    if antennas.is_empty() {
        return Err(Error::InvalidConfig("no antenna counts given".into()));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &m in antennas {
        let mut c = cfg.clone();
        c.system.antennas = m;
        c.ser = None;
        c.trace_stride = None;
        log::info!("antenna sweep: M = {m}");
        let res = run_experiment(&c)?;
        for s in res.summary() {
            rows.push(SweepRow {
                antennas: m,
                solver: s.solver,
                trials: s.trials,
                mean_papr_db: s.mean_papr_db,
                papr_1pct_db: s.papr_1pct_db,
                mean_mui_db: s.mean_mui_db,
                mean_obr_db: s.mean_obr_db,
            });
        }
        failures.extend(res.failures);
    }
    Ok((rows, failures))
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv_writer(path)?;
    w.write_record([
        "antennas",
        "solver",
        "trials",
        "mean_papr_db",
        "papr_1pct_db",
        "mean_mui_db",
        "mean_obr_db",
    ])
    .map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.antennas.to_string(),
            r.solver.clone(),
            r.trials.to_string(),
            fmt_f64(r.mean_papr_db),
            fmt_f64(r.papr_1pct_db),
            fmt_f64(r.mean_mui_db),
            fmt_f64(r.mean_obr_db),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// SNR at which a SER curve crosses `target`, by linear interpolation of
/// `log10(SER)` between grid points. `None` when the curve never crosses.
pub fn snr_at_ser(snr_db: &[f64], counts: &[SerCount], target: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = snr_db
        .iter()
        .zip(counts)
        .filter(|(_, c)| c.errors > 0)
        .map(|(s, c)| (*s, c.rate().log10()))
        .collect();
    let t = target.log10();
    pts.windows(2).find_map(|w| {
        let ((s0, e0), (s1, e1)) = (w[0], w[1]);
        if e0 >= t && e1 <= t && e0 != e1 {
            Some(s0 + (t - e0) * (s1 - s0) / (e1 - e0))
        } else if e0 == t {
            Some(s0)
        } else {
            None
        }
    })
}
