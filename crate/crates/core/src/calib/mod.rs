//! Measurement ingestion, experiment metrics, parameter fitting and
//! free-oscillation damping estimates.

mod decrement;
mod objective;
mod optimize;
mod trace;

use thiserror::Error;

use crate::metrics::MetricsError;

pub use decrement::{joint_constants_from_decrement, log_decrement_fit, DecrementFit};
pub use objective::{
    objective, objective_detailed, read_records, write_records, ExperimentRecord, FitProblem, FitWeights, FreeParam,
    ParamId, RecordResidual, FAILURE_PENALTY,
};
pub use optimize::{fit, FitReport, NelderMeadOpts};
pub use trace::{realized_gait, resample_trajectory, smooth_trace, trace_metrics, trace_trajectory, MeasuredTrace};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace has {0} samples, at least 3 required")]
    TooShort(usize),
    #[error("time stamps not strictly increasing at sample {index}")]
    NonIncreasingTime { index: usize },
    #[error("non-finite value at sample {index}")]
    NonFinite { index: usize },
    #[error("gap of {dt:.4} s before sample {index} exceeds three nominal intervals ({nominal:.4} s)")]
    Gap { index: usize, dt: f64, nominal: f64 },
    #[error("smoothing window {window} must be odd and between 1 and the trace length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("need at least 3 successive positive peaks, found {0}")]
    InsufficientPeaks(usize),
    #[error("invalid experiment record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid bounds for `{name}`: [{lower}, {upper}]")]
    InvalidBounds { name: &'static str, lower: f64, upper: f64 },
    #[error("initial guess for `{name}` = {value} outside [{lower}, {upper}]")]
    GuessOutOfBounds {
        name: &'static str,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("invalid fit problem: {0}")]
    InvalidProblem(String),
    #[error("evaluation budget of {} exhausted (best J = {:.4e})", .0.evaluations, .0.best_j)]
    BudgetExhausted(Box<FitReport>),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
