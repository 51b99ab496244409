//! Extended Kalman filter over the six-element translational state.

use nalgebra::{Matrix3, Matrix6, Matrix6x3, Vector3, Vector6};

use super::ControlError;
use crate::dynamics::PlantModel;
use crate::inversion::CurrentVector;

/// Central-difference steps for the flow Jacobian (m, m/s).
const FD_STEP_POSITION: f64 = 1e-6;
const FD_STEP_VELOCITY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    /// `[position (m), velocity (m/s)]`
    pub mean: Vector6<f64>,
    /// Symmetric after every predict and update.
    pub covariance: Matrix6<f64>,
}

impl StateEstimate {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>, position_sigma: f64, velocity_sigma: f64) -> Self {
        let mut p = Matrix6::zeros();
        for i in 0..3 {
            p[(i, i)] = position_sigma * position_sigma;
            p[(i + 3, i + 3)] = velocity_sigma * velocity_sigma;
        }
        Self {
            mean: Vector6::new(position.x, position.y, position.z, velocity.x, velocity.y, velocity.z),
            covariance: p,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.mean.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.mean.fixed_rows::<3>(3).into_owned()
    }
}

/// Discrete white-noise-acceleration covariance for an acceleration held
/// constant over `dt` with standard deviation `sigma` per axis.
pub fn process_noise(sigma: f64, dt: f64) -> Matrix6<f64> {
    let s2 = sigma * sigma;
    let mut q = Matrix6::zeros();
    for i in 0..3 {
        q[(i, i)] = s2 * dt.powi(4) / 4.0;
        q[(i, i + 3)] = s2 * dt.powi(3) / 2.0;
        q[(i + 3, i)] = s2 * dt.powi(3) / 2.0;
        q[(i + 3, i + 3)] = s2 * dt * dt;
    }
    q
}

fn symmetrize(p: &Matrix6<f64>) -> Matrix6<f64> {
    (p + p.transpose()) * 0.5
}

/// Propagates the estimate through the model dynamics with `commanded`
/// taken as the coil currents. Returns the prediction and the flow
/// Jacobian used for the covariance.
pub fn ekf_predict(
    est: &StateEstimate,
    commanded: &CurrentVector,
    dt: f64,
    model: &PlantModel,
    q: &Matrix6<f64>,
    h_hint: &mut f64,
) -> Result<(StateEstimate, Matrix6<f64>), ControlError> {
    if !(dt > 0.0) {
        return Err(ControlError::InvalidConfig(format!("prediction interval must be positive, got {dt}")));
    }
    let (mean, report) = model.propagate_rigid(&est.mean, commanded, dt, h_hint)?;
    let f = flow_jacobian(model, &est.mean, commanded, &report.steps)?;
    let covariance = symmetrize(&(f * est.covariance * f.transpose() + q));
    Ok((StateEstimate { mean, covariance }, f))
}

/// Central differences of the flow map, all perturbed runs sharing the
/// nominal step schedule.
pub fn flow_jacobian(
    model: &PlantModel,
    x: &Vector6<f64>,
    currents: &CurrentVector,
    steps: &[f64],
) -> Result<Matrix6<f64>, ControlError> {
    let mut f = Matrix6::zeros();
    for j in 0..6 {
        let h = if j < 3 { FD_STEP_POSITION } else { FD_STEP_VELOCITY };
        let mut up = *x;
        let mut dn = *x;
        up[j] += h;
        dn[j] -= h;
        let yu = model.propagate_rigid_steps(&up, currents, steps)?;
        let yd = model.propagate_rigid_steps(&dn, currents, steps)?;
        f.set_column(j, &((yu - yd) / (2.0 * h)));
    }
    Ok(f)
}

/// Kalman update with a direct position measurement `z` of covariance `r`.
pub fn ekf_update(est: &StateEstimate, z: &Vector3<f64>, r: &Matrix3<f64>) -> Result<StateEstimate, ControlError> {
    let p = &est.covariance;
    let s = p.fixed_view::<3, 3>(0, 0) + r;
    let chol = s.cholesky().ok_or(ControlError::SingularInnovation)?;
    // K = P Hᵀ S⁻¹ with H = [I 0].
    let pht: Matrix6x3<f64> = p.fixed_view::<6, 3>(0, 0).into_owned();
    let k: Matrix6x3<f64> = chol.solve(&pht.transpose()).transpose();
    let innovation = z - est.position();
    let mean = est.mean + k * innovation;
    let mut ikh = Matrix6::identity();
    for i in 0..6 {
        for j in 0..3 {
            ikh[(i, j)] -= k[(i, j)];
        }
    }
    let covariance = symmetrize(&(ikh * p * ikh.transpose() + k * r * k.transpose()));
    Ok(StateEstimate { mean, covariance })
}
