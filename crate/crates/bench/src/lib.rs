//! Shared fixtures for the benchmarks.

use papr_core::harness::{draw_instance, TrialInstance};
use papr_core::{ConstraintOperator, OperatorOptions, SystemConfig};

/// Desk-scale system: M=32, K=4, N=64, 52 data tones, D=4.
pub fn desk() -> SystemConfig {
    let mut cfg = SystemConfig::centered(32, 4, 64, 52, 4).expect("valid desk config");
    cfg.seed = 7;
    cfg
}

/// Full-scale system: M=100, K=10, N=128, 114 data tones, D=8.
pub fn full() -> SystemConfig {
    let mut cfg = SystemConfig::centered(100, 10, 128, 114, 8).expect("valid full config");
    cfg.seed = 7;
    cfg
}

pub struct Fixture {
    pub cfg: SystemConfig,
    pub instance: TrialInstance,
    pub op: ConstraintOperator,
}

pub fn fixture(cfg: SystemConfig, options: OperatorOptions) -> Fixture {
    let instance = draw_instance(&cfg, 0).expect("trial draw");
    let op = ConstraintOperator::build(&instance.channel, &cfg, options).expect("operator");
    Fixture { cfg, instance, op }
}

/// Deterministic test vector of length `n`.
pub fn probe_vector(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0)
        .collect()
}
