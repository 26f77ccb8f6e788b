use thiserror::Error;

/// Errors produced by the precoding, solver and experiment routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown alphabet `{0}`")]
    UnknownAlphabet(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("dense operator needs {required} entries, budget is {budget}")]
    DenseBudgetExceeded { required: usize, budget: usize },

    #[error("singular Gram matrix H H^H on tone {tone}")]
    SingularGram { tone: usize },

    #[error("negative variance input at index {index}: {value}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("non-finite {quantity} at iteration {iteration}")]
    NonFinite {
        quantity: &'static str,
        iteration: usize,
    },

    #[error("nonpositive {quantity} at index {index}: {value}")]
    NonPositive {
        quantity: &'static str,
        index: usize,
        value: f64,
    },

    #[error("power iteration did not converge within {iterations} iterations")]
    PowerIteration { iterations: usize },

    #[error("{metric} is undefined: {reason}")]
    Metric {
        metric: &'static str,
        reason: String,
    },

    #[error("trial {trial}, solver {solver}: {source}")]
    Trial {
        trial: usize,
        solver: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
