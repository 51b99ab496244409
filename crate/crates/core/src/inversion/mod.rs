//! Desired force to coil currents.
//!
//! The induced force is a quadratic form in the current vector, so a
//! desired force defines a union of quadric surfaces in current space. The
//! solver picks the point on it closest (in a weighted norm) to a reference
//! current; the reference is what distinguishes the allocation strategies.

mod io;
mod sqp;
mod stable;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::fieldmodel::{DipoleSourceSet, FieldError};

pub use io::{read_reference_currents, write_reference_currents};
pub use sqp::{solve_currents, solve_currents_with, Solution, SolveStatus, SolverOptions};
pub use stable::{find_stable_currents, openloop_trajectory, position_jacobian, StableSearchOptions, StableSolution};

/// Coil currents (A).
pub type CurrentVector = DVector<f64>;

/// Commanded-current jump (A) that, with a sign change, counts as a switch.
pub const DEFAULT_SWITCH_THRESHOLD: f64 = 20.0;
/// Qualifying updates closer than this to a counted switch are merged (s).
pub const SWITCH_REFRACTORY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum InversionError {
    #[error("invalid inversion problem: {0}")]
    InvalidProblem(String),
    #[error("desired force is not reachable within the current bounds (best residual {residual:.3e} N)")]
    Infeasible { residual: f64 },
    #[error("reference trajectory index {index} out of range (length {len})")]
    ReferenceOutOfRange { index: usize, len: usize },
    #[error("no stable solution at waypoint {index} ({position:?})")]
    NoStableSolution { index: usize, position: Vector3<f64> },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// `min (I − I_r)ᵀ W (I − I_r)` s.t. `F(I, p) = F_d`, `I_min ≤ I ≤ I_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionProblem {
    /// N
    pub desired_force: Vector3<f64>,
    /// m
    pub point: Vector3<f64>,
    pub reference: CurrentVector,
    /// Symmetric positive definite.
    pub weight: DMatrix<f64>,
    pub lower: CurrentVector,
    pub upper: CurrentVector,
    pub alpha: f64,
}

impl InversionProblem {
    /// Identity weight and the coil set's current bounds.
    pub fn for_set(
        set: &DipoleSourceSet,
        point: Vector3<f64>,
        desired_force: Vector3<f64>,
        reference: CurrentVector,
        alpha: f64,
    ) -> Self {
        let n = set.coil_count();
        Self {
            desired_force,
            point,
            reference,
            weight: DMatrix::identity(n, n),
            lower: set.lower_bounds(),
            upper: set.upper_bounds(),
            alpha,
        }
    }

    pub fn with_weight(mut self, weight: DMatrix<f64>) -> Self {
        self.weight = weight;
        self
    }

    pub fn validate(&self, coil_count: usize) -> Result<(), InversionError> {
        let bad = |m: String| Err(InversionError::InvalidProblem(m));
        let n = coil_count;
        if self.reference.len() != n || self.lower.len() != n || self.upper.len() != n {
            return bad(format!("vector lengths do not match {n} coils"));
        }
        if self.weight.shape() != (n, n) {
            return bad(format!("weight must be {n}×{n}"));
        }
        let finite = self
            .desired_force
            .iter()
            .chain(self.reference.iter())
            .chain(self.lower.iter())
            .chain(self.upper.iter())
            .chain(self.weight.iter())
            .all(|v| v.is_finite())
            && self.alpha.is_finite();
        if !finite {
            return bad("non-finite problem data".into());
        }
        if self.lower.iter().zip(self.upper.iter()).any(|(l, u)| l > u) {
            return bad("lower bound exceeds upper bound".into());
        }
        if (&self.weight - self.weight.transpose()).amax() > 1e-12 * self.weight.amax() {
            return bad("weight is not symmetric".into());
        }
        if self.weight.clone().cholesky().is_none() {
            return bad("weight is not positive definite".into());
        }
        Ok(())
    }
}

/// How the reference current `I_r` is chosen at each control update.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyKind {
    /// `I_r` is the previous solution.
    MinDelta,
    /// `I_r` is zero.
    MinNorm,
    /// `I_r` follows a precomputed schedule, one entry per control update.
    RefTrack(Vec<CurrentVector>),
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::MinDelta => "min-delta",
            StrategyKind::MinNorm => "min-norm",
            StrategyKind::RefTrack(_) => "ref-track",
        }
    }
}

/// Reference current for control update `k`.
pub fn reference_for(strategy: &StrategyKind, k: usize, previous: &CurrentVector) -> Result<CurrentVector, InversionError> {
    match strategy {
        StrategyKind::MinDelta => Ok(previous.clone()),
        StrategyKind::MinNorm => Ok(DVector::zeros(previous.len())),
        StrategyKind::RefTrack(schedule) => schedule.get(k).cloned().ok_or(InversionError::ReferenceOutOfRange {
            index: k,
            len: schedule.len(),
        }),
    }
}

/// Counts coil switches in a commanded-current log: updates where some
/// coil changes sign with a jump larger than `threshold`. A qualifying
/// update within [`SWITCH_REFRACTORY`] of the last counted one is merged
/// into it.
pub fn count_switches(times: &[f64], currents: &[CurrentVector], threshold: f64) -> usize {
    switch_times(times, currents, threshold).len()
}

/// Times of the updates counted by [`count_switches`].
pub fn switch_times(times: &[f64], currents: &[CurrentVector], threshold: f64) -> Vec<f64> {
    assert_eq!(times.len(), currents.len(), "times and currents must align");
    let mut out: Vec<f64> = Vec::new();
    for k in 1..currents.len() {
        let qualifies = currents[k - 1]
            .iter()
            .zip(currents[k].iter())
            .any(|(a, b)| a * b < 0.0 && (b - a).abs() > threshold);
        if !qualifies {
            continue;
        }
        if out.last().is_none_or(|&t| times[k] - t >= SWITCH_REFRACTORY) {
            out.push(times[k]);
        }
    }
    out
}
