//! Per-axis PID by pole placement on the damped double integrator.

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::ControlError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    /// N/m
    pub kp: Vector3<f64>,
    /// N/(m·s)
    pub ki: Vector3<f64>,
    /// N·s/m
    pub kd: Vector3<f64>,
    /// Bound on `|Ki·∫e|` per axis (N).
    pub integral_limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControllerState {
    /// m·s
    pub integral: Vector3<f64>,
    pub previous_error: Option<Vector3<f64>>,
}

impl ControllerState {
    /// Integrator preloaded so that its output equals `force`, clamped to
    /// the integral limit.
    pub fn preloaded(gains: &PidGains, force: &Vector3<f64>) -> Self {
        let mut s = Self::default();
        for i in 0..3 {
            if gains.ki[i] != 0.0 {
                s.integral[i] = force[i] / gains.ki[i];
            }
        }
        clamp_integral(&mut s.integral, gains);
        s
    }
}

/// Gains placing the closed-loop poles of `m s² x = u − c s x` with
/// `u = Kp e + Ki ∫e + Kd ė` at `poles` on every axis.
///
/// The characteristic polynomial `m s³ + (c + Kd) s² + Kp s + Ki` is matched
/// to `m (s − p₁)(s − p₂)(s − p₃)`.
pub fn synthesize_gains(mass: f64, drag: f64, poles: [f64; 3], integral_limit: f64) -> Result<PidGains, ControlError> {
    if !poles.iter().all(|p| p.is_finite() && *p < 0.0) {
        return Err(ControlError::InvalidConfig(format!("poles must be strictly negative, got {poles:?}")));
    }
    if !(mass > 0.0 && drag >= 0.0 && integral_limit > 0.0) {
        return Err(ControlError::InvalidConfig(
            "mass and integral limit must be positive, drag non-negative".into(),
        ));
    }
    let [p1, p2, p3] = poles;
    let kd = -mass * (p1 + p2 + p3) - drag;
    let kp = mass * (p1 * p2 + p1 * p3 + p2 * p3);
    let ki = -mass * p1 * p2 * p3;
    Ok(PidGains {
        kp: Vector3::repeat(kp),
        ki: Vector3::repeat(ki),
        kd: Vector3::repeat(kd),
        integral_limit,
    })
}

/// Companion matrix of the closed-loop characteristic polynomial on one axis.
pub fn closed_loop_companion(mass: f64, drag: f64, gains: &PidGains, axis: usize) -> Matrix3<f64> {
    let a2 = (drag + gains.kd[axis]) / mass;
    let a1 = gains.kp[axis] / mass;
    let a0 = gains.ki[axis] / mass;
    Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -a0, -a1, -a2)
}

fn clamp_integral(integral: &mut Vector3<f64>, gains: &PidGains) {
    for i in 0..3 {
        if gains.ki[i] != 0.0 {
            let cap = gains.integral_limit / gains.ki[i].abs();
            integral[i] = integral[i].clamp(-cap, cap);
        }
    }
}

/// Feedback force for tracking error `x_des − x_est` (both `[p, v]`).
/// The error integral uses the trapezoidal rule and is clamped so that
/// `|Ki·∫e| ≤ integral_limit` on every axis.
pub fn control_law(
    ctrl: &mut ControllerState,
    gains: &PidGains,
    x_des: &Vector6<f64>,
    x_est: &Vector6<f64>,
    dt: f64,
) -> Vector3<f64> {
    let e: Vector3<f64> = (x_des - x_est).fixed_rows::<3>(0).into_owned();
    let e_vel: Vector3<f64> = (x_des - x_est).fixed_rows::<3>(3).into_owned();
    let increment = match ctrl.previous_error {
        Some(prev) => 0.5 * (e + prev) * dt,
        None => e * dt,
    };
    ctrl.integral += increment;
    clamp_integral(&mut ctrl.integral, gains);
    ctrl.previous_error = Some(e);
    gains.kp.component_mul(&e) + gains.ki.component_mul(&ctrl.integral) + gains.kd.component_mul(&e_vel)
}
