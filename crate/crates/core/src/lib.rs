//! Joint peak-to-average power ratio (PAPR) reduction and multi-user
//! interference (MUI) cancelation for OFDM-based massive MIMO downlinks.
//!
//! The crate models one downlink OFDM frame as an underdetermined real
//! linear system `y = A x` (see [`linops`]) and searches for a solution
//! whose entries cluster at a common magnitude. The main solver is the
//! variational EM algorithm in [`emtgm`], which pairs a truncated Gaussian
//! mixture prior with a single-pass GAMP likelihood approximation
//! ([`gamp`]). Zero-forcing, clipping and an accelerated proximal-gradient
//! ℓ∞ solver live in [`baselines`]; [`metrics`] and [`harness`] turn
//! Monte-Carlo runs into CCDF, MUI, OBR and SER tables.

pub mod baselines;
pub mod channel;
pub mod emtgm;
pub mod error;
pub mod gamp;
pub mod harness;
pub mod linops;
pub mod metrics;
pub mod model;

pub use baselines::FitraConfig;
pub use channel::{draw_taps, freq_response, FreqChannel, TapChannel};
pub use emtgm::Hyperparams;
pub use error::{Error, Result};
pub use harness::{
    emit_results, run_experiment, sweep_antennas, ExperimentConfig, ExperimentResults,
    OutputFormat, SolverSpec,
};
pub use linops::{
    ConstraintOperator, DenseMatrix, Direction, LinearOperator, OperatorMode, OperatorOptions,
    VarianceMode,
};
pub use metrics::{SerCount, TrialRecord};
pub use model::{
    Alphabet, AntennaFrame, PrecodedFrame, StackLayout, SymbolFrame, SystemConfig, TimeFrame,
};
