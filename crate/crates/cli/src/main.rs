//! `papr`: runs seeded Monte-Carlo experiments from a JSON configuration and
//! writes plot-ready result tables.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use papr_core::harness::{write_sweep, ExperimentConfig, TrialFailure};
use papr_core::{emit_results, run_experiment, sweep_antennas};

#[derive(Parser)]
#[command(
    name = "papr",
    version,
    about = "Joint PAPR reduction and MUI cancelation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured solver on the configured trials.
    Run(RunArgs),
    /// Repeat the experiment for several antenna counts.
    SweepAntennas(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the configuration.
    #[arg(long, env = "PAPR_OUT_DIR")]
    out: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated subset of the configured solvers.
    #[arg(long, value_delimiter = ',')]
    solvers: Option<Vec<String>>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated antenna counts.
    #[arg(long, value_delimiter = ',', required = true)]
    m_values: Vec<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(dir) = &self.out {
            cfg.output.dir = dir.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.system.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(names) = &self.solvers {
            cfg.select_solvers(names)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(failures: &[TrialFailure]) -> Result<()> {
    for f in failures {
        log::error!("trial {} solver {}: {}", f.trial, f.solver, f.error);
    }
    if let Some(f) = failures.first() {
        bail!(
            "{} solver run(s) failed, first at trial {} ({}): {}",
            failures.len(),
            f.trial,
            f.solver,
            f.error
        );
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = args.common.load()?;
    log::info!(
        "{} trials, solvers: {}",
        cfg.trials,
        cfg.solvers
            .iter()
            .map(|s| s.name())
            .collect::<Vec<_>>()
            .join(",")
    );
    let results = run_experiment(&cfg)?;
    if !results.records.is_empty() {
        let written = emit_results(&results, &cfg.output.dir, &cfg.output.formats)
            .with_context(|| format!("writing to {}", cfg.output.dir.display()))?;
        for p in written {
            println!("{}", p.display());
        }
        for s in results.summary() {
            log::info!(
                "{}: PAPR {:.2} dB, MUI {:.1} dB, OBR {:.1} dB over {} trials",
                s.solver,
                s.mean_papr_db,
                s.mean_mui_db,
                s.mean_obr_db,
                s.trials
            );
        }
    }
    report(&results.failures)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let (rows, failures) = sweep_antennas(&cfg, &args.m_values)?;
    let path = cfg.output.dir.join("sweep.csv");
    write_sweep(&path, &rows).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    report(&failures)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::SweepAntennas(a) => sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
