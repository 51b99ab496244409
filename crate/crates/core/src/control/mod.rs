//! Estimation and feedback: EKF over the translational state, PID force
//! law, and the per-tick loop that ties cameras, estimator, controller,
//! current allocation and plant together.

mod ekf;
mod pid;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{tick_count, LogRow, RunLog, RunStatus, SolverFlag, Trajectory};
use crate::dynamics::{CameraRig, DynamicsError, NoiseSpec, Plant, PlantModel, PlantState};
use crate::fieldmodel::actuation_matrix;
use crate::inversion::{
    find_stable_currents, openloop_trajectory, reference_for, solve_currents_with, CurrentVector, InversionError,
    InversionProblem, SolveStatus, SolverOptions, StableSearchOptions, StrategyKind,
};
use crate::magnetics::induced_force;

pub use ekf::{ekf_predict, ekf_update, flow_jacobian, process_noise, StateEstimate};
pub use pid::{closed_loop_companion, control_law, synthesize_gains, ControllerState, PidGains};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
}

/// Gains, rates and estimator tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Closed-loop poles per axis (rad/s).
    pub poles: [f64; 3],
    /// N
    pub integral_limit: f64,
    /// Hz
    pub control_rate: f64,
    /// Initial interval excluded from metrics (s).
    pub settle_time: f64,
    /// Process-noise acceleration sigma assumed by the EKF; `None` uses the
    /// simulated disturbance level.
    pub process_accel_sigma: Option<f64>,
    /// Multiplier on the triangulation covariance used as `R`.
    pub measurement_scale: f64,
    /// Standard-deviation floor added to `R` on every axis (m).
    pub measurement_floor: f64,
    pub initial_position_sigma: f64,
    pub initial_velocity_sigma: f64,
    /// A.
    pub switch_threshold: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            poles: [-4.0, -5.0, -6.0],
            integral_limit: 200e-6,
            control_rate: 50.0,
            settle_time: 10.0,
            process_accel_sigma: None,
            measurement_scale: 1.0,
            measurement_floor: 1e-7,
            initial_position_sigma: 1e-3,
            initial_velocity_sigma: 1e-3,
            switch_threshold: crate::inversion::DEFAULT_SWITCH_THRESHOLD,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::InvalidConfig(m.into()));
        if !(self.control_rate > 0.0 && self.control_rate.is_finite()) {
            return bad("control rate must be positive");
        }
        if !(self.settle_time >= 0.0) {
            return bad("settle time must be non-negative");
        }
        if !(self.measurement_scale > 0.0 && self.measurement_floor >= 0.0) {
            return bad("measurement scale must be positive and floor non-negative");
        }
        if self.process_accel_sigma.is_some_and(|s| !(s >= 0.0)) {
            return bad("process sigma must be non-negative");
        }
        if !(self.initial_position_sigma > 0.0 && self.initial_velocity_sigma > 0.0) {
            return bad("initial sigmas must be positive");
        }
        if !(self.switch_threshold > 0.0) {
            return bad("switch threshold must be positive");
        }
        Ok(())
    }
}

/// Truth plant, the controller's model of it, and the sensing setup.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub plant: PlantModel,
    /// What the controller believes; may differ from `plant` in weight or
    /// coil calibration.
    pub model: PlantModel,
    pub rig: CameraRig,
    pub noise: NoiseSpec,
    pub controller: ControllerConfig,
    pub solver: SolverOptions,
    pub stable_search: StableSearchOptions,
}

impl Simulation {
    /// Controller model identical to the plant.
    pub fn matched(plant: PlantModel, rig: CameraRig, noise: NoiseSpec) -> Self {
        Self {
            model: plant.clone(),
            plant,
            rig,
            noise,
            controller: ControllerConfig::default(),
            solver: SolverOptions::default(),
            stable_search: StableSearchOptions::default(),
        }
    }

    pub fn gains(&self) -> Result<PidGains, ControlError> {
        let drag = self.model.fluid.drag_coefficient(&self.model.sample);
        synthesize_gains(
            self.model.sample.mass,
            drag,
            self.controller.poles,
            self.controller.integral_limit,
        )
    }

    /// Open-loop reference currents on the control grid of `trajectory`.
    pub fn openloop_schedule(&self, trajectory: &Trajectory) -> Result<Vec<CurrentVector>, ControlError> {
        let path = trajectory.on_grid(self.controller.control_rate);
        Ok(openloop_trajectory(
            &self.model.set,
            &path,
            &self.model.sample.support_force(),
            self.model.alpha,
            &self.stable_search,
        )?)
    }

    /// Most robust stable currents at `point` according to the model.
    pub fn initial_currents(&self, point: &Vector3<f64>) -> Result<CurrentVector, ControlError> {
        let sols = find_stable_currents(
            &self.model.set,
            point,
            &self.model.sample.support_force(),
            self.model.alpha,
            &self.stable_search,
        )?;
        sols.into_iter()
            .next()
            .map(|s| s.currents)
            .ok_or(ControlError::Inversion(InversionError::NoStableSolution {
                index: 0,
                position: *point,
            }))
    }
}

enum Mode<'a> {
    Closed(&'a StrategyKind),
    Open(&'a [CurrentVector]),
}

/// Feedback run along `trajectory`.
///
/// Each tick: triangulate, EKF update (skipped without a measurement),
/// PID force, current allocation at the estimated position (holding the
/// previous currents if the force is unreachable), plant integration and
/// EKF prediction. The plant starts at rest at the trajectory start,
/// carrying the model's most robust stable currents (or the first
/// schedule entry for reference tracking). Runtime failures end the run
/// early with a log marked failed; only setup problems return `Err`.
pub fn run_closed_loop(
    sim: &Simulation,
    strategy: &StrategyKind,
    trajectory: &Trajectory,
    seed: u64,
) -> Result<RunLog, ControlError> {
    run(sim, Mode::Closed(strategy), trajectory, seed)
}

/// Replays `schedule` (one entry per control tick) without feedback. The
/// estimator still runs so that the log carries an estimated position.
pub fn run_open_loop(
    sim: &Simulation,
    trajectory: &Trajectory,
    schedule: &[CurrentVector],
    seed: u64,
) -> Result<RunLog, ControlError> {
    if schedule.is_empty() {
        return Err(ControlError::InvalidConfig("open-loop schedule is empty".into()));
    }
    run(sim, Mode::Open(schedule), trajectory, seed)
}

fn run(sim: &Simulation, mode: Mode<'_>, trajectory: &Trajectory, seed: u64) -> Result<RunLog, ControlError> {
    sim.controller.validate()?;
    sim.noise.validate()?;
    let n = sim.plant.coil_count();
    if sim.model.coil_count() != n {
        return Err(ControlError::InvalidConfig("model and plant coil counts differ".into()));
    }
    let cfg = &sim.controller;
    let dt = 1.0 / cfg.control_rate;
    let gains = sim.gains()?;
    let start = trajectory.position(trajectory.start_time());

    let initial = match &mode {
        Mode::Open(schedule) => schedule[0].clone(),
        Mode::Closed(StrategyKind::RefTrack(schedule)) => schedule
            .first()
            .cloned()
            .ok_or(ControlError::InvalidConfig("reference schedule is empty".into()))?,
        Mode::Closed(_) => sim.initial_currents(&start)?,
    };
    if initial.len() != n {
        return Err(ControlError::InvalidConfig("initial currents have the wrong length".into()));
    }

    let mut plant = Plant::new(sim.plant.clone(), PlantState::at_rest(start, initial.clone()))?;
    let mut est = StateEstimate::new(start, Vector3::zeros(), cfg.initial_position_sigma, cfg.initial_velocity_sigma);
    let support = sim.model.sample.support_force();
    let mut ctrl = ControllerState::preloaded(&gains, &support);
    let q = process_noise(cfg.process_accel_sigma.unwrap_or(sim.noise.process_accel_sigma), dt);
    let floor = Matrix3::identity() * cfg.measurement_floor.powi(2);

    let mut camera_rng = ChaCha8Rng::seed_from_u64(seed);
    camera_rng.set_stream(1);
    let mut disturbance_rng = ChaCha8Rng::seed_from_u64(seed);
    disturbance_rng.set_stream(2);
    let disturbance = Normal::new(0.0, sim.noise.process_accel_sigma)
        .map_err(|e| ControlError::InvalidConfig(e.to_string()))?;
    let rig = CameraRig {
        cameras: sim
            .rig
            .cameras
            .iter()
            .map(|c| {
                crate::dynamics::CameraModel::new(*c.projection(), sim.noise.pixel_sigma, c.image_bounds())
                    .expect("rig cameras are valid")
            })
            .collect(),
    };

    let mut log = RunLog::new(n);
    let mut previous = initial;
    let mut predict_hint = 0.0;
    let ticks = tick_count(trajectory.duration(), cfg.control_rate);

    for k in 0..ticks {
        let t = trajectory.start_time() + k as f64 * dt;
        let truth = plant.state().clone();

        let measurement = rig.measure(&truth.position, &mut camera_rng);
        let dropout = measurement.is_none();
        if let Some(m) = measurement {
            let r = m.covariance * cfg.measurement_scale + floor;
            match ekf_update(&est, &m.position, &r) {
                Ok(e) => est = e,
                Err(e) => {
                    log.status = RunStatus::Failed(e.to_string());
                    break;
                }
            }
        }

        let x_des = trajectory.state(t);
        let (commanded, flag, desired_force) = match &mode {
            Mode::Open(schedule) => (schedule[k.min(schedule.len() - 1)].clone(), SolverFlag::OpenLoop, support),
            Mode::Closed(strategy) => {
                let force = control_law(&mut ctrl, &gains, &x_des, &est.mean, dt);
                match allocate(sim, strategy, k, &previous, &est.position(), &force) {
                    Ok((currents, flag)) => (currents, flag, force),
                    Err(e) => {
                        log.status = RunStatus::Failed(e.to_string());
                        break;
                    }
                }
            }
        };

        let switch_event = previous
            .iter()
            .zip(commanded.iter())
            .any(|(a, b)| a * b < 0.0 && (b - a).abs() > cfg.switch_threshold);
        let realized = match sim.plant.set.field_state(&truth.currents, &truth.position) {
            Ok(fs) => induced_force(sim.plant.alpha, &fs),
            Err(e) => {
                log.status = RunStatus::Failed(e.to_string());
                break;
            }
        };
        log.rows.push(LogRow {
            t,
            desired_position: x_des.fixed_rows::<3>(0).into_owned(),
            true_position: truth.position,
            estimated_position: est.position(),
            commanded: commanded.clone(),
            actual: truth.currents.clone(),
            desired_force,
            realized_force: realized,
            switch_event,
            solver: flag,
            dropout,
        });
        previous = commanded;

        if k + 1 == ticks {
            break;
        }
        let push = if sim.noise.process_accel_sigma > 0.0 {
            Vector3::from_fn(|_, _| disturbance.sample(&mut disturbance_rng))
        } else {
            Vector3::zeros()
        };
        if let Err(e) = plant.advance(&previous, &push, dt) {
            log.status = RunStatus::Failed(e.to_string());
            break;
        }
        match ekf_predict(&est, &previous, dt, &sim.model, &q, &mut predict_hint) {
            Ok((e, _)) => est = e,
            Err(e) => {
                log.status = RunStatus::Failed(e.to_string());
                break;
            }
        }
    }
    Ok(log)
}

/// Currents for force `force` at `position`; holds `previous` when the
/// force is unreachable.
fn allocate(
    sim: &Simulation,
    strategy: &StrategyKind,
    k: usize,
    previous: &CurrentVector,
    position: &Vector3<f64>,
    force: &Vector3<f64>,
) -> Result<(CurrentVector, SolverFlag), ControlError> {
    let reference = reference_for(strategy, k, previous)?;
    let actuation = actuation_matrix(&sim.model.set, position).map_err(InversionError::from)?;
    let problem = InversionProblem::for_set(&sim.model.set, *position, *force, reference, sim.model.alpha);
    match solve_currents_with(&problem, &actuation, previous, &sim.solver) {
        Ok(sol) => Ok((
            sol.currents,
            match sol.status {
                SolveStatus::Converged => SolverFlag::Converged,
                SolveStatus::MaxIterations => SolverFlag::MaxIterations,
            },
        )),
        Err(InversionError::Infeasible { .. }) => Ok((previous.clone(), SolverFlag::Infeasible)),
        Err(e) => Err(e.into()),
    }
}
