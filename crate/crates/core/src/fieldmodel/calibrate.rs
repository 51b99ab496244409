//! Levenberg-Marquardt fit of dipole poses and strengths to field samples.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{dipole_field, dipole_gradient_matrix, DipoleSourceSet, FieldError, FieldSample};
use crate::magnetics::MU0;

const PARAMS_PER_DIPOLE: usize = 6;

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Stop when an accepted step lowers the residual by less than this
    /// fraction.
    pub relative_tolerance: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            initial_damping: 1e-3,
            relative_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub set: DipoleSourceSet,
    pub r_squared: f64,
    pub sum_squared_residuals: f64,
    pub iterations: usize,
    /// `false` when the iteration cap was hit; `set` is then the best iterate.
    pub converged: bool,
    pub rank_deficient: bool,
    /// Sum of squared residuals after each accepted step, starting with the
    /// initial model.
    pub history: Vec<f64>,
}

/// Fits every dipole's position and moment-per-amp so that the summed
/// dipole fields reproduce `samples` in the least-squares sense.
///
/// Coil current limits are carried over from `init`. Each coil needs at
/// least six samples per dipole it is modelled with.
pub fn calibrate(
    samples: &[FieldSample],
    init: &DipoleSourceSet,
    options: &CalibrationOptions,
) -> Result<CalibrationResult, FieldError> {
    check_samples(samples, init)?;

    let mut params = pack_params(init);
    let mut model = init.clone();
    let mut residuals = residual_vector(samples, &model)?;
    let mut ssr = residuals.norm_squared();
    let mut history = vec![ssr];
    let mut damping = options.initial_damping;
    let mut converged = false;
    let mut rank_deficient = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        if ssr == 0.0 {
            converged = true;
            break;
        }
        let jac = jacobian(samples, &model)?;
        if iterations == 1 {
            rank_deficient = is_rank_deficient(&jac);
            if rank_deficient {
                log::warn!("calibration Jacobian is rank deficient; some dipole parameters are unidentifiable");
            }
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &residuals;
        let diag_floor = jtj.diagonal().max() * 1e-15;

        let mut accepted = false;
        while damping < 1e16 {
            let mut lhs = jtj.clone();
            for i in 0..lhs.nrows() {
                lhs[(i, i)] += damping * jtj[(i, i)].max(diag_floor);
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-&grad))) else {
                damping *= 10.0;
                continue;
            };
            let trial_params = &params + &step;
            let trial_model = unpack_params(init, &trial_params);
            let trial_res = match residual_vector(samples, &trial_model) {
                Ok(r) => r,
                Err(FieldError::SingularPoint { .. }) => {
                    damping *= 10.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let trial_ssr = trial_res.norm_squared();
            if trial_ssr < ssr {
                let gain = (ssr - trial_ssr) / ssr;
                params = trial_params;
                model = trial_model;
                residuals = trial_res;
                ssr = trial_ssr;
                history.push(ssr);
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                if gain < options.relative_tolerance {
                    converged = true;
                }
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            // No damping level improves the fit: stationary to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }

    if !converged {
        log::warn!("calibration stopped after {iterations} iterations without converging");
    }

    Ok(CalibrationResult {
        r_squared: r_squared(samples, &model)?,
        set: model,
        sum_squared_residuals: ssr,
        iterations,
        converged,
        rank_deficient,
        history,
    })
}

/// Coefficient of determination `1 − SS_res/SS_tot`, pooling all Cartesian
/// components of all samples around their grand mean.
pub fn r_squared(samples: &[FieldSample], model: &DipoleSourceSet) -> Result<f64, FieldError> {
    let res = residual_vector(samples, model)?;
    let n = (3 * samples.len()) as f64;
    let mean = samples.iter().map(|s| s.measured_field.sum()).sum::<f64>() / n;
    let ss_tot: f64 = samples
        .iter()
        .flat_map(|s| s.measured_field.iter().map(|v| (v - mean).powi(2)).collect::<Vec<_>>())
        .sum();
    Ok(1.0 - res.norm_squared() / ss_tot)
}

fn check_samples(samples: &[FieldSample], init: &DipoleSourceSet) -> Result<(), FieldError> {
    if samples.is_empty() {
        return Err(FieldError::NoSamples);
    }
    init.validate()?;
    let mut per_coil = vec![0usize; init.coil_count()];
    for (i, s) in samples.iter().enumerate() {
        if s.coil_index >= init.coil_count() {
            return Err(FieldError::InvalidSample {
                index: i,
                reason: format!("coil index {} out of range", s.coil_index),
            });
        }
        if s.current == 0.0 || !s.current.is_finite() {
            return Err(FieldError::InvalidSample {
                index: i,
                reason: "current must be finite and non-zero".into(),
            });
        }
        if !s.point.iter().chain(s.measured_field.iter()).all(|v| v.is_finite()) {
            return Err(FieldError::InvalidSample {
                index: i,
                reason: "non-finite coordinates or field".into(),
            });
        }
        per_coil[s.coil_index] += 1;
    }
    for (coil, (&got, model)) in per_coil.iter().zip(init.coils()).enumerate() {
        let need = PARAMS_PER_DIPOLE * model.dipoles.len();
        if got < need {
            return Err(FieldError::InsufficientSamples { coil, got, need });
        }
    }
    Ok(())
}

fn pack_params(set: &DipoleSourceSet) -> DVector<f64> {
    let mut v = Vec::with_capacity(PARAMS_PER_DIPOLE * set.dipole_count());
    for coil in set.coils() {
        for d in &coil.dipoles {
            v.extend(d.position.iter());
            v.extend(d.moment_per_amp.iter());
        }
    }
    DVector::from_vec(v)
}

fn unpack_params(template: &DipoleSourceSet, params: &DVector<f64>) -> DipoleSourceSet {
    let mut set = template.clone();
    let mut k = 0;
    for coil in set.coils_mut() {
        for d in &mut coil.dipoles {
            d.position = Vector3::new(params[k], params[k + 1], params[k + 2]);
            d.moment_per_amp = Vector3::new(params[k + 3], params[k + 4], params[k + 5]);
            k += PARAMS_PER_DIPOLE;
        }
    }
    set
}

/// Offset of each coil's first parameter in the packed vector.
fn coil_offsets(set: &DipoleSourceSet) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(set.coil_count());
    let mut k = 0;
    for coil in set.coils() {
        offsets.push(k);
        k += PARAMS_PER_DIPOLE * coil.dipoles.len();
    }
    offsets
}

fn residual_vector(samples: &[FieldSample], model: &DipoleSourceSet) -> Result<DVector<f64>, FieldError> {
    let mut r = DVector::zeros(3 * samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut predicted = Vector3::zeros();
        for d in &model.coils()[s.coil_index].dipoles {
            predicted += dipole_field(d, s.current, &s.point)?;
        }
        let diff = predicted - s.measured_field;
        r.fixed_rows_mut::<3>(3 * i).copy_from(&diff);
    }
    Ok(r)
}

/// Analytic Jacobian of the residuals. Moving a dipole by `δ` shifts its
/// field like moving the observation point by `−δ`, and the field is linear
/// in the moment.
fn jacobian(samples: &[FieldSample], model: &DipoleSourceSet) -> Result<DMatrix<f64>, FieldError> {
    let offsets = coil_offsets(model);
    let cols = PARAMS_PER_DIPOLE * model.dipole_count();
    let mut jac = DMatrix::zeros(3 * samples.len(), cols);
    for (i, s) in samples.iter().enumerate() {
        let mut col = offsets[s.coil_index];
        for d in &model.coils()[s.coil_index].dipoles {
            let grad = dipole_gradient_matrix(d, s.current, &s.point)?;
            let r = s.point - d.position;
            let dist = r.norm();
            let rhat = r / dist;
            let kernel = MU0 / (4.0 * std::f64::consts::PI * dist.powi(3))
                * (3.0 * rhat * rhat.transpose() - Matrix3::identity());
            jac.view_mut((3 * i, col), (3, 3)).copy_from(&(-grad));
            jac.view_mut((3 * i, col + 3), (3, 3)).copy_from(&(s.current * kernel));
            col += PARAMS_PER_DIPOLE;
        }
    }
    Ok(jac)
}

fn is_rank_deficient(jac: &DMatrix<f64>) -> bool {
    // Column-normalise so that metres and A·m²/A are comparable.
    let mut scaled = jac.clone();
    for mut c in scaled.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    let sv = scaled.singular_values();
    let max = sv.max();
    max == 0.0 || sv.min() <= 1e-10 * max
}
