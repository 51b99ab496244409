//! Experiments on the simulated rig: reference paths, per-tick logs,
//! tracking and power metrics, Welch comparisons between conditions.

mod experiment;
mod log;
mod stats;
mod trajectory;

use nalgebra::Vector3;
use thiserror::Error;

use crate::control::ControlError;
use crate::inversion::InversionError;

pub use experiment::{
    compare, load_report, read_trajectory, recompute_summaries, run_experiment, summarize, write_trajectory,
    CoilSetRef, Comparison, ExperimentConfig, ExperimentReport, MetricStats, StrategyChoice, TrajectorySpec,
    TrialSummary, CONFIG_FILE, REPORT_FILE,
};
pub use log::{LogRow, RunLog, RunStatus, SolverFlag};
pub use stats::{mean_power, post_settle, rmse, welch_t_test, ErrorSource, WelchResult};
pub use trajectory::{cube_trajectory, tick_count, CubeSpec, Trajectory};

/// Significance level used when flagging comparisons.
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("trajectory leaves the workspace at t = {time} s ({position:?})")]
    OutsideWorkspace { time: f64, position: Vector3<f64> },
    #[error("no log rows after the settle time {settle_time} s")]
    EmptyWindow { settle_time: f64 },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
}
