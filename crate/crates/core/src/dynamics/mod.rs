//! Truth-side simulation: translational sphere dynamics under induced force,
//! Stokes drag and weight, first-order coil current lag, and synthetic
//! camera measurements.

mod camera;
mod integrator;

use nalgebra::{DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fieldmodel::{DipoleSourceSet, FieldError, Workspace};
use crate::inversion::CurrentVector;
use crate::magnetics::{dipole_gain, induced_force, DriveSpec, PhysicsError, SampleSpec};

pub use camera::{
    observe, project, triangulate, triangulation_covariance, CameraError, CameraModel, CameraRig, PositionMeasurement,
};
pub use integrator::{integrate_dp5, integrate_steps, StepReport, Tolerances};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("sample left the guard region at {position:?}")]
    EscapedWorkspace { position: [f64; 3] },
    #[error("integrator step size underflow at t = {time}")]
    StepSizeUnderflow { time: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Currents actually flowing in the coils (A).
    pub currents: CurrentVector,
}

impl PlantState {
    pub fn at_rest(position: Vector3<f64>, currents: CurrentVector) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            currents,
        }
    }

    fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            6 + self.currents.len(),
            self.position.iter().chain(self.velocity.iter()).chain(self.currents.iter()).copied(),
        )
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            position: v.fixed_rows::<3>(0).into_owned(),
            velocity: v.fixed_rows::<3>(3).into_owned(),
            currents: v.rows(6, v.len() - 6).into_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidSpec {
    /// Pa·s
    pub dynamic_viscosity: f64,
}

impl Default for FluidSpec {
    /// Water at 20 °C.
    fn default() -> Self {
        Self {
            dynamic_viscosity: 1.0e-3,
        }
    }
}

impl FluidSpec {
    /// Stokes drag coefficient `6πμR` (N·s/m).
    pub fn drag_coefficient(&self, sample: &SampleSpec) -> f64 {
        6.0 * std::f64::consts::PI * self.dynamic_viscosity * sample.drag_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the piecewise-constant disturbance acceleration
    /// drawn once per control update (m/s²).
    pub process_accel_sigma: f64,
    pub pixel_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            process_accel_sigma: 1e-4,
            pixel_sigma: 0.5,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            process_accel_sigma: 0.0,
            pixel_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.process_accel_sigma >= 0.0 && self.pixel_sigma >= 0.0) {
            return Err(DynamicsError::InvalidParameter("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything needed to evaluate the sphere's equations of motion.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub sample: SampleSpec,
    pub fluid: FluidSpec,
    pub set: DipoleSourceSet,
    pub alpha: f64,
    /// Leaving this box aborts the simulation.
    pub guard: Workspace,
    /// First-order coil lag (s).
    pub coil_time_constant: f64,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantDerivative {
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub current_rate: CurrentVector,
}

impl PlantModel {
    /// 5 ms coil lag and a guard region twice the workspace size.
    pub fn new(
        sample: SampleSpec,
        fluid: FluidSpec,
        set: DipoleSourceSet,
        drive: &DriveSpec,
        workspace: &Workspace,
    ) -> Result<Self, DynamicsError> {
        sample.validate()?;
        set.validate()?;
        if !(fluid.dynamic_viscosity >= 0.0) {
            return Err(DynamicsError::InvalidParameter("viscosity must be non-negative".into()));
        }
        let alpha = dipole_gain(&sample, drive)?.alpha;
        Ok(Self {
            sample,
            fluid,
            set,
            alpha,
            guard: workspace.inflated(2.0),
            coil_time_constant: 5e-3,
            tolerances: Tolerances::default(),
        })
    }

    pub fn coil_count(&self) -> usize {
        self.set.coil_count()
    }

    /// Translational acceleration with the given coil currents.
    pub fn acceleration(
        &self,
        position: &Vector3<f64>,
        velocity: &Vector3<f64>,
        currents: &CurrentVector,
    ) -> Result<Vector3<f64>, DynamicsError> {
        if !position.iter().chain(velocity.iter()).all(|v| v.is_finite()) {
            return Err(DynamicsError::NonFinite("plant state"));
        }
        if !self.guard.contains(position) {
            return Err(DynamicsError::EscapedWorkspace {
                position: [position.x, position.y, position.z],
            });
        }
        let magnetic = induced_force(self.alpha, &self.set.field_state(currents, position)?);
        let drag = self.fluid.drag_coefficient(&self.sample) * velocity;
        Ok((magnetic - drag + self.sample.effective_weight) / self.sample.mass)
    }

    pub fn derivatives(&self, state: &PlantState, commanded: &CurrentVector) -> Result<PlantDerivative, DynamicsError> {
        if !(self.coil_time_constant > 0.0) {
            return Err(DynamicsError::InvalidParameter("coil time constant must be positive".into()));
        }
        Ok(PlantDerivative {
            velocity: state.velocity,
            acceleration: self.acceleration(&state.position, &state.velocity, &state.currents)?,
            current_rate: (commanded - &state.currents) / self.coil_time_constant,
        })
    }

    fn rigid_rhs<'a>(
        &'a self,
        currents: &'a CurrentVector,
        disturbance: Vector3<f64>,
    ) -> impl FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, DynamicsError> + 'a {
        move |_t, y| {
            let p = y.fixed_rows::<3>(0).into_owned();
            let v = y.fixed_rows::<3>(3).into_owned();
            let a = self.acceleration(&p, &v, currents)? + disturbance;
            Ok(DVector::from_iterator(6, v.iter().chain(a.iter()).copied()))
        }
    }

    /// Advances the six-element rigid state `[p, v]` by `dt` with the coil
    /// currents held fixed, using adaptive steps.
    pub fn propagate_rigid(
        &self,
        state: &Vector6<f64>,
        currents: &CurrentVector,
        dt: f64,
        h_hint: &mut f64,
    ) -> Result<(Vector6<f64>, StepReport), DynamicsError> {
        let y0 = DVector::from_column_slice(state.as_slice());
        let (y, report) = integrate_dp5(self.rigid_rhs(currents, Vector3::zeros()), 0.0, &y0, dt, &self.tolerances, h_hint)?;
        Ok((Vector6::from_column_slice(y.as_slice()), report))
    }

    /// As [`propagate_rigid`](Self::propagate_rigid) but through a fixed
    /// step schedule.
    pub fn propagate_rigid_steps(
        &self,
        state: &Vector6<f64>,
        currents: &CurrentVector,
        steps: &[f64],
    ) -> Result<Vector6<f64>, DynamicsError> {
        let y0 = DVector::from_column_slice(state.as_slice());
        let y = integrate_steps(self.rigid_rhs(currents, Vector3::zeros()), 0.0, &y0, steps)?;
        Ok(Vector6::from_column_slice(y.as_slice()))
    }
}

/// The simulated sphere and coil drivers.
#[derive(Debug, Clone)]
pub struct Plant {
    model: PlantModel,
    state: PlantState,
    time: f64,
    h_hint: f64,
}

impl Plant {
    pub fn new(model: PlantModel, initial: PlantState) -> Result<Self, DynamicsError> {
        if initial.currents.len() != model.coil_count() {
            return Err(DynamicsError::InvalidParameter(format!(
                "initial state has {} currents, coil set has {}",
                initial.currents.len(),
                model.coil_count()
            )));
        }
        Ok(Self {
            model,
            state: initial,
            time: 0.0,
            h_hint: 0.0,
        })
    }

    pub fn model(&self) -> &PlantModel {
        &self.model
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Holds `commanded` and a constant disturbance acceleration for `dt`.
    pub fn advance(
        &mut self,
        commanded: &CurrentVector,
        disturbance: &Vector3<f64>,
        dt: f64,
    ) -> Result<StepReport, DynamicsError> {
        if commanded.len() != self.model.coil_count() {
            return Err(DynamicsError::InvalidParameter("commanded current length mismatch".into()));
        }
        let model = &self.model;
        let rhs = |_t: f64, y: &DVector<f64>| -> Result<DVector<f64>, DynamicsError> {
            let s = PlantState::from_vector(y);
            let d = model.derivatives(&s, commanded)?;
            let acc = d.acceleration + disturbance;
            Ok(DVector::from_iterator(
                y.len(),
                d.velocity.iter().chain(acc.iter()).chain(d.current_rate.iter()).copied(),
            ))
        };
        let y0 = self.state.to_vector();
        let (y, report) = integrate_dp5(rhs, self.time, &y0, dt, &model.tolerances, &mut self.h_hint)?;
        self.state = PlantState::from_vector(&y);
        self.time += dt;
        Ok(report)
    }
}
