//! Point-dipole model of an electromagnet array.
//!
//! Each coil is represented by one or more point dipoles whose moments scale
//! linearly with the coil current. Field and gradient contributions superpose,
//! so at any point the array is summarised by an 8×n actuation matrix whose
//! columns hold the unit-current field (3 rows) and packed gradient (5 rows)
//! of each coil.

mod calibrate;
mod io;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::magnetics::{pack_force_matrix, pack_gradient, FieldState, Vector5, MU0};

pub use calibrate::{calibrate, r_squared, CalibrationOptions, CalibrationResult};
pub use io::{read_field_samples, write_field_samples};

/// Points closer than this to a source are treated as coincident (m).
const SINGULAR_DISTANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("evaluation point {point:?} coincides with a dipole source")]
    SingularPoint { point: [f64; 3] },
    #[error("invalid coil model: {0}")]
    InvalidModel(String),
    #[error("invalid field sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("coil {coil} has {got} samples, need at least {need}")]
    InsufficientSamples { coil: usize, got: usize, need: usize },
    #[error("no calibration samples supplied")]
    NoSamples,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// A point dipole whose moment is `current · moment_per_amp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipoleSource {
    /// m
    pub position: Vector3<f64>,
    /// A·m² per A of coil current
    pub moment_per_amp: Vector3<f64>,
}

impl DipoleSource {
    pub fn new(position: Vector3<f64>, moment_per_amp: Vector3<f64>) -> Self {
        Self {
            position,
            moment_per_amp,
        }
    }
}

/// One physical coil: its fitted dipoles and current limits (A).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoilModel {
    pub dipoles: Vec<DipoleSource>,
    #[serde(default = "default_current_min")]
    pub current_min: f64,
    #[serde(default = "default_current_max")]
    pub current_max: f64,
}

fn default_current_min() -> f64 {
    -100.0
}

fn default_current_max() -> f64 {
    100.0
}

impl CoilModel {
    pub fn single(source: DipoleSource) -> Self {
        Self {
            dipoles: vec![source],
            current_min: default_current_min(),
            current_max: default_current_max(),
        }
    }
}

/// Calibrated dipole model of a whole coil array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipoleSourceSet {
    coils: Vec<CoilModel>,
}

impl DipoleSourceSet {
    pub fn new(coils: Vec<CoilModel>) -> Result<Self, FieldError> {
        let set = Self { coils };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.coils.is_empty() {
            return Err(FieldError::InvalidModel("at least one coil is required".into()));
        }
        for (i, coil) in self.coils.iter().enumerate() {
            if coil.dipoles.is_empty() {
                return Err(FieldError::InvalidModel(format!("coil {i} has no dipoles")));
            }
            let finite = coil
                .dipoles
                .iter()
                .all(|d| d.position.iter().chain(d.moment_per_amp.iter()).all(|v| v.is_finite()));
            if !finite {
                return Err(FieldError::InvalidModel(format!("coil {i} has non-finite dipole parameters")));
            }
            if !(coil.current_min <= coil.current_max) {
                return Err(FieldError::InvalidModel(format!(
                    "coil {i} current bounds [{}, {}] are inverted",
                    coil.current_min, coil.current_max
                )));
            }
        }
        Ok(())
    }

    pub fn coil_count(&self) -> usize {
        self.coils.len()
    }

    pub fn coils(&self) -> &[CoilModel] {
        &self.coils
    }

    pub fn coils_mut(&mut self) -> &mut [CoilModel] {
        &mut self.coils
    }

    pub fn dipole_count(&self) -> usize {
        self.coils.iter().map(|c| c.dipoles.len()).sum()
    }

    pub fn lower_bounds(&self) -> DVector<f64> {
        DVector::from_iterator(self.coils.len(), self.coils.iter().map(|c| c.current_min))
    }

    pub fn upper_bounds(&self) -> DVector<f64> {
        DVector::from_iterator(self.coils.len(), self.coils.iter().map(|c| c.current_max))
    }

    /// Sets the same current window on every coil.
    pub fn with_current_limits(mut self, min: f64, max: f64) -> Self {
        for c in &mut self.coils {
            c.current_min = min;
            c.current_max = max;
        }
        self
    }

    /// Field and packed gradient at `point` for the given coil currents.
    pub fn field_state(&self, currents: &DVector<f64>, point: &Vector3<f64>) -> Result<FieldState, FieldError> {
        let mut state = FieldState::zero();
        for (coil, &current) in self.coils.iter().zip(currents.iter()) {
            for d in &coil.dipoles {
                state = state
                    + FieldState::new(dipole_field(d, current, point)?, dipole_gradient(d, current, point)?);
            }
        }
        Ok(state)
    }

    /// Four side coils on an 85 mm ring in the `z = 25 mm` plane, aimed at
    /// the workspace centre, and a fifth coil 40 mm below the workspace floor
    /// pointing up. The workspace is the 5 cm cube with its floor at `z = 0`.
    pub fn five_coil_default() -> Self {
        let ws = Workspace::five_coil_default();
        let mut coils = ring_coils(4, 0.085, ws.center.z, &ws.center, FIVE_COIL_MOMENT_PER_AMP);
        coils.push(CoilModel::single(DipoleSource::new(
            Vector3::new(0.0, 0.0, ws.floor() - 0.040),
            Vector3::new(0.0, 0.0, FIVE_COIL_MOMENT_PER_AMP),
        )));
        Self { coils }
    }

    /// Four coils on a 70 mm ring 5 mm below the centre of a workspace
    /// centred at `z = 57 mm`, each aimed at that centre.
    pub fn four_coil_default() -> Self {
        let ws = Workspace::four_coil_default();
        Self {
            coils: ring_coils(4, 0.070, ws.center.z - 0.005, &ws.center, FOUR_COIL_MOMENT_PER_AMP),
        }
    }
}

const FIVE_COIL_MOMENT_PER_AMP: f64 = 0.065;
const FOUR_COIL_MOMENT_PER_AMP: f64 = 0.13;

fn ring_coils(count: usize, radius: f64, z: f64, target: &Vector3<f64>, strength: f64) -> Vec<CoilModel> {
    (0..count)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / count as f64;
            let position = Vector3::new(radius * theta.cos(), radius * theta.sin(), z);
            let axis = (target - position).normalize();
            CoilModel::single(DipoleSource::new(position, strength * axis))
        })
        .collect()
}

/// Axis-aligned box the sample is meant to stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub center: Vector3<f64>,
    pub half_extent: Vector3<f64>,
}

impl Workspace {
    pub fn new(center: Vector3<f64>, half_extent: Vector3<f64>) -> Self {
        Self { center, half_extent }
    }

    pub fn five_coil_default() -> Self {
        Self::new(Vector3::new(0.0, 0.0, 0.025), Vector3::repeat(0.025))
    }

    pub fn four_coil_default() -> Self {
        Self::new(Vector3::new(0.0, 0.0, 0.057), Vector3::repeat(0.025))
    }

    pub fn floor(&self) -> f64 {
        self.center.z - self.half_extent.z
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - self.center)
            .iter()
            .zip(self.half_extent.iter())
            .all(|(d, h)| d.abs() <= *h)
    }

    /// Same centre, every half-extent multiplied by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        Self::new(self.center, self.half_extent * factor)
    }
}

/// Field of a point dipole carrying `current` (T).
pub fn dipole_field(src: &DipoleSource, current: f64, point: &Vector3<f64>) -> Result<Vector3<f64>, FieldError> {
    let r = point - src.position;
    let dist = r.norm();
    if dist < SINGULAR_DISTANCE {
        return Err(FieldError::SingularPoint { point: [point.x, point.y, point.z] });
    }
    let rhat = r / dist;
    let m = current * src.moment_per_amp;
    Ok(MU0 / (4.0 * PI * dist.powi(3)) * (3.0 * rhat * rhat.dot(&m) - m))
}

/// Full 3×3 gradient `∂B_i/∂x_j` of a point dipole.
pub fn dipole_gradient_matrix(
    src: &DipoleSource,
    current: f64,
    point: &Vector3<f64>,
) -> Result<Matrix3<f64>, FieldError> {
    let r = point - src.position;
    let dist = r.norm();
    if dist < SINGULAR_DISTANCE {
        return Err(FieldError::SingularPoint { point: [point.x, point.y, point.z] });
    }
    let rhat = r / dist;
    let m = current * src.moment_per_amp;
    let rm = rhat.dot(&m);
    let outer = m * rhat.transpose() + rhat * m.transpose();
    let radial = rm * (Matrix3::identity() - 5.0 * rhat * rhat.transpose());
    Ok(3.0 * MU0 / (4.0 * PI * dist.powi(4)) * (outer + radial))
}

/// Packed gradient of a point dipole (T/m).
pub fn dipole_gradient(src: &DipoleSource, current: f64, point: &Vector3<f64>) -> Result<Vector5, FieldError> {
    dipole_gradient_matrix(src, current, point).map(|m| pack_gradient(&m))
}

/// Unit-current field and gradient of every coil at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuationMatrix {
    matrix: DMatrix<f64>,
    point: Vector3<f64>,
}

pub fn actuation_matrix(set: &DipoleSourceSet, point: &Vector3<f64>) -> Result<ActuationMatrix, FieldError> {
    let n = set.coil_count();
    let mut matrix = DMatrix::zeros(8, n);
    for (j, coil) in set.coils().iter().enumerate() {
        for d in &coil.dipoles {
            let b = dipole_field(d, 1.0, point)?;
            let g = dipole_gradient(d, 1.0, point)?;
            for i in 0..3 {
                matrix[(i, j)] += b[i];
            }
            for i in 0..5 {
                matrix[(3 + i, j)] += g[i];
            }
        }
    }
    Ok(ActuationMatrix { matrix, point: *point })
}

impl ActuationMatrix {
    pub fn from_parts(matrix: DMatrix<f64>, point: Vector3<f64>) -> Self {
        assert_eq!(matrix.nrows(), 8, "actuation matrix must have 8 rows");
        Self { matrix, point }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn eval_point(&self) -> Vector3<f64> {
        self.point
    }

    pub fn coil_count(&self) -> usize {
        self.matrix.ncols()
    }

    /// 3×n unit-current field block (T/A).
    pub fn field_block(&self) -> DMatrix<f64> {
        self.matrix.rows(0, 3).into_owned()
    }

    /// 5×n unit-current packed gradient block (T/m/A).
    pub fn gradient_block(&self) -> DMatrix<f64> {
        self.matrix.rows(3, 5).into_owned()
    }

    pub fn field_state(&self, currents: &DVector<f64>) -> FieldState {
        let v = &self.matrix * currents;
        FieldState::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector5::new(v[3], v[4], v[5], v[6], v[7]),
        )
    }

    /// `2α[𝔹I]_f 𝔾I`
    pub fn force(&self, alpha: f64, currents: &DVector<f64>) -> Vector3<f64> {
        crate::magnetics::induced_force(alpha, &self.field_state(currents))
    }

    /// Symmetric matrices `Q_i` with `F_i(I) = Iᵀ Q_i I`.
    pub fn force_forms(&self, alpha: f64) -> [DMatrix<f64>; 3] {
        let bb = self.field_block();
        let gg = self.gradient_block();
        let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
        let packs = basis.map(|e| pack_force_matrix(&e));
        std::array::from_fn(|i| {
            // coupling[j][k]: coefficient of B_j·G_k in row i of [B]_f G
            let mut coupling = DMatrix::zeros(3, 5);
            for (j, p) in packs.iter().enumerate() {
                for k in 0..5 {
                    coupling[(j, k)] = p[(i, k)];
                }
            }
            let x = bb.transpose() * coupling * &gg;
            alpha * (&x + x.transpose())
        })
    }

    /// 3×n Jacobian of the force with respect to the currents.
    pub fn force_jacobian(&self, alpha: f64, currents: &DVector<f64>) -> DMatrix<f64> {
        let forms = self.force_forms(alpha);
        let mut jac = DMatrix::zeros(3, currents.len());
        for (i, q) in forms.iter().enumerate() {
            let row = 2.0 * q * currents;
            jac.row_mut(i).copy_from(&row.transpose());
        }
        jac
    }
}

/// One pickup measurement with a single coil energised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub point: Vector3<f64>,
    pub coil_index: usize,
    pub current: f64,
    pub measured_field: Vector3<f64>,
}
