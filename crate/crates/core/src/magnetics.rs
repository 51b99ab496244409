//! Induced-dipole physics for a conducting sphere in an oscillating field.
//!
//! A solid sphere of radius `a` and conductivity `σ` driven at angular
//! frequency `ω` develops eddy currents whose moment is `g_c·B`, with `g_c`
//! the complex dipole gain. Averaged over one period the potential energy is
//! `-α·BᵀB` with `α = |g_c|·cos(γ)/2`, and the average force follows from
//! the field and its packed gradient as `F = 2α·[B]_f·G`.
//!
//! Field amplitudes are peak values of `B(t) = B_a·sin(ωt)`; the time
//! averaging factor lives entirely inside `α`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::gauss_legendre_on;

/// Permeability of free space (N/A²).
pub const MU0: f64 = 4.0e-7 * PI;

/// Handbook conductivity of aluminium (S/m).
pub const ALUMINIUM_CONDUCTIVITY: f64 = 3.5e7;

/// Packed gradient: `[∂Bx/∂x, ∂Bx/∂y, ∂Bx/∂z, ∂By/∂y, ∂By/∂z]`.
pub type Vector5 = SVector<f64, 5>;

/// The 3×5 force packing matrix `[B]_f`.
pub type ForcePacking = SMatrix<f64, 3, 5>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("quadrature did not converge: relative change {relative_change:.3e} between refinements")]
    QuadratureNotConverged { relative_change: f64 },
}

/// Physical description of the manipulated sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    /// Sphere radius (m).
    pub radius: f64,
    /// Electrical conductivity (S/m).
    pub conductivity: f64,
    /// Mass (kg).
    pub mass: f64,
    /// Effective weight after buoyant offset (N). Points along gravity.
    pub effective_weight: Vector3<f64>,
    /// Radius used for Stokes drag (m).
    pub drag_radius: f64,
}

impl SampleSpec {
    pub fn new(
        radius: f64,
        conductivity: f64,
        mass: f64,
        effective_weight: Vector3<f64>,
        drag_radius: f64,
    ) -> Result<Self, PhysicsError> {
        let s = Self {
            radius,
            conductivity,
            mass,
            effective_weight,
            drag_radius,
        };
        s.validate()?;
        Ok(s)
    }

    /// 12.5 mm hollow, water-filled aluminium sphere with a 56 µN effective
    /// weight and 8 g total mass.
    pub fn default_aluminium() -> Self {
        Self {
            radius: 0.0125,
            conductivity: ALUMINIUM_CONDUCTIVITY,
            mass: 8.0e-3,
            effective_weight: Vector3::new(0.0, 0.0, -56.0e-6),
            drag_radius: 0.0125,
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let finite = [self.radius, self.conductivity, self.mass, self.drag_radius]
            .iter()
            .all(|v| v.is_finite())
            && self.effective_weight.iter().all(|v| v.is_finite());
        if !finite {
            return Err(PhysicsError::NonFinite("SampleSpec"));
        }
        if self.radius <= 0.0 {
            return Err(PhysicsError::InvalidParameter(format!("radius must be > 0, got {}", self.radius)));
        }
        if self.conductivity < 0.0 {
            return Err(PhysicsError::InvalidParameter(format!(
                "conductivity must be >= 0, got {}",
                self.conductivity
            )));
        }
        if self.mass <= 0.0 {
            return Err(PhysicsError::InvalidParameter(format!("mass must be > 0, got {}", self.mass)));
        }
        if self.drag_radius <= 0.0 {
            return Err(PhysicsError::InvalidParameter(format!(
                "drag radius must be > 0, got {}",
                self.drag_radius
            )));
        }
        Ok(())
    }

    /// Force the magnetic field has to supply to hold the sample still.
    pub fn support_force(&self) -> Vector3<f64> {
        -self.effective_weight
    }
}

/// Drive frequency and permeability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveSpec {
    /// rad/s
    pub angular_frequency: f64,
    /// N/A²
    pub permeability: f64,
}

impl DriveSpec {
    pub fn from_frequency_hz(frequency: f64) -> Self {
        Self {
            angular_frequency: 2.0 * PI * frequency,
            permeability: MU0,
        }
    }

    pub fn frequency_hz(&self) -> f64 {
        self.angular_frequency / (2.0 * PI)
    }
}

impl Default for DriveSpec {
    /// 14.5 kHz coil drive.
    fn default() -> Self {
        Self::from_frequency_hz(14.5e3)
    }
}

/// Complex and time-averaged induced dipole gains (A·m²/T).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipoleGain {
    pub complex: Complex64,
    pub alpha: f64,
    /// Phase of the induced moment relative to the impressed field (rad).
    pub gamma: f64,
}

/// Field and packed gradient at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldState {
    pub field: Vector3<f64>,
    pub gradient: Vector5,
}

impl FieldState {
    pub fn new(field: Vector3<f64>, gradient: Vector5) -> Self {
        Self { field, gradient }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector5::zeros())
    }

    /// Full symmetric, traceless 3×3 gradient `∂B_i/∂x_j`.
    pub fn gradient_matrix(&self) -> Matrix3<f64> {
        unpack_gradient(&self.gradient)
    }
}

impl std::ops::Add for FieldState {
    type Output = FieldState;
    fn add(self, rhs: FieldState) -> FieldState {
        FieldState::new(self.field + rhs.field, self.gradient + rhs.gradient)
    }
}

/// Packs the independent entries of a symmetric traceless gradient matrix.
pub fn pack_gradient(m: &Matrix3<f64>) -> Vector5 {
    Vector5::new(m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)])
}

pub fn unpack_gradient(g: &Vector5) -> Matrix3<f64> {
    Matrix3::new(
        g[0],
        g[1],
        g[2],
        g[1],
        g[3],
        g[4],
        g[2],
        g[4],
        -g[0] - g[3],
    )
}

/// Complex propagation constant `k = √(−iωσμ0)` (principal root, 1/m).
pub fn propagation_constant(conductivity: f64, drive: &DriveSpec) -> Complex64 {
    if conductivity == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    Complex64::new(0.0, -drive.angular_frequency * conductivity * drive.permeability).sqrt()
}

/// Numerically stable complex cotangent.
fn cot(z: Complex64) -> Complex64 {
    let i = Complex64::i();
    if z.im <= 0.0 {
        // |e^{-2iz}| = e^{2 Im z} <= 1
        let e = (-2.0 * i * z).exp();
        i * (1.0 + e) / (1.0 - e)
    } else {
        let e = (2.0 * i * z).exp();
        -i * (1.0 + e) / (1.0 - e)
    }
}

// Taylor coefficients of x·cot(x) in powers of x², starting at x⁴.
const XCOT_TAIL: [f64; 11] = [
    -1.0 / 45.0,
    -2.0 / 945.0,
    -1.0 / 4725.0,
    -2.0 / 93555.0,
    -1382.0 / 638512875.0,
    -4.0 / 18243225.0,
    -3617.0 / 162820783125.0,
    -87734.0 / 38979295480125.0,
    -349222.0 / 1531329465290625.0,
    -310732.0 / 13447856940643125.0,
    -472728182.0 / 201919571963756521875.0,
];

/// Below this |ak| the shape factor is summed as a power series.
const SERIES_CUTOFF: f64 = 0.5;

/// `(x² − 3 + 3x·cot x) / x⁴`, the bracket of the gain divided by `x⁴`.
fn shape_factor_over_x4(x: Complex64) -> Complex64 {
    if x.norm() < SERIES_CUTOFF {
        let x2 = x * x;
        let mut acc = Complex64::new(0.0, 0.0);
        for c in XCOT_TAIL.iter().rev() {
            acc = acc * x2 + 3.0 * c;
        }
        acc
    } else {
        let x2 = x * x;
        (x2 - 3.0 + 3.0 * x * cot(x)) / (x2 * x2)
    }
}

/// Complex gain `g_c` and its time average `α` for a solid sphere.
pub fn dipole_gain(sample: &SampleSpec, drive: &DriveSpec) -> Result<DipoleGain, PhysicsError> {
    let (a, sigma, w) = (sample.radius, sample.conductivity, drive.angular_frequency);
    if !(a.is_finite() && sigma.is_finite() && w.is_finite() && drive.permeability.is_finite()) {
        return Err(PhysicsError::NonFinite("dipole_gain"));
    }
    if a <= 0.0 {
        return Err(PhysicsError::InvalidParameter(format!("radius must be > 0, got {a}")));
    }
    if w <= 0.0 {
        return Err(PhysicsError::InvalidParameter(format!(
            "angular frequency must be > 0, got {w}"
        )));
    }
    if sigma < 0.0 {
        return Err(PhysicsError::InvalidParameter(format!(
            "conductivity must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(DipoleGain {
            complex: Complex64::new(0.0, 0.0),
            alpha: 0.0,
            gamma: 0.0,
        });
    }
    let k = propagation_constant(sigma, drive);
    let x = k * a;
    // 2πiωσa/k⁴ · f(x)  with  f(x) = x⁴ · shape_factor_over_x4(x)
    let prefactor = Complex64::new(0.0, 2.0 * PI * w * sigma * a.powi(5));
    let g = prefactor * shape_factor_over_x4(x);
    let gamma = g.arg();
    Ok(DipoleGain {
        complex: g,
        alpha: g.norm() * gamma.cos() / 2.0,
        gamma,
    })
}

/// Perfect-conductor limit of the complex gain, `−2πa³/μ0`.
pub fn perfect_conductor_gain(radius: f64, drive: &DriveSpec) -> f64 {
    -2.0 * PI * radius.powi(3) / drive.permeability
}

fn spherical_j0(z: Complex64) -> Complex64 {
    if z.norm() < 1e-3 {
        let z2 = z * z;
        1.0 - z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sin() / z
    }
}

fn spherical_j1(z: Complex64) -> Complex64 {
    if z.norm() < 0.3 {
        let z2 = z * z;
        let mut acc = Complex64::new(0.0, 0.0);
        // z/3 − z³/30 + z⁵/840 − z⁷/45360 + z⁹/3991680 − z¹¹/518918400
        for c in [
            -1.0 / 518918400.0,
            1.0 / 3991680.0,
            -1.0 / 45360.0,
            1.0 / 840.0,
            -1.0 / 30.0,
            1.0 / 3.0,
        ] {
            acc = acc * z2 + c;
        }
        acc * z
    } else {
        z.sin() / (z * z) - z.cos() / z
    }
}

/// Induced moment by direct volume integration of `½ r × J` over the sphere
/// using the closed-form eddy-current density.
///
/// `J = C·j1(k|r|)·(B × r̂)` with `C = −3iωσa / (2ka·j1'(ka) + 4·j1(ka))`.
/// The radial direction uses `radial_points` Gauss-Legendre nodes; the
/// result is compared with a half-resolution pass and rejected if the two
/// differ by more than 1e-3 relative.
pub fn moment_by_integration(
    sample: &SampleSpec,
    drive: &DriveSpec,
    b: &Vector3<f64>,
    radial_points: usize,
) -> Result<Vector3<Complex64>, PhysicsError> {
    if !b.iter().all(|v| v.is_finite()) {
        return Err(PhysicsError::NonFinite("moment_by_integration"));
    }
    if radial_points < 4 {
        return Err(PhysicsError::InvalidParameter(format!(
            "need at least 4 radial points, got {radial_points}"
        )));
    }
    sample.validate()?;
    let zero = Vector3::from_element(Complex64::new(0.0, 0.0));
    if sample.conductivity == 0.0 || b.norm() == 0.0 {
        return Ok(zero);
    }
    let fine = integrate_moment(sample, drive, b, radial_points);
    let coarse = integrate_moment(sample, drive, b, radial_points / 2);
    let scale = fine.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let diff = (fine - coarse).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let rel = if scale > 0.0 { diff / scale } else { diff };
    if rel > 1e-3 {
        return Err(PhysicsError::QuadratureNotConverged { relative_change: rel });
    }
    Ok(fine)
}

fn integrate_moment(
    sample: &SampleSpec,
    drive: &DriveSpec,
    b: &Vector3<f64>,
    radial_points: usize,
) -> Vector3<Complex64> {
    let a = sample.radius;
    let w = drive.angular_frequency;
    let sigma = sample.conductivity;
    let k = propagation_constant(sigma, drive);
    let ka = k * a;
    let j1a = spherical_j1(ka);
    let j1pa = spherical_j0(ka) - 2.0 * j1a / ka;
    let c = Complex64::new(0.0, -3.0 * w * sigma * a) / (2.0 * ka * j1pa + 4.0 * j1a);

    const ANGULAR: usize = 24;
    let (rs, wr) = gauss_legendre_on(radial_points, 0.0, a);
    let (thetas, wt) = gauss_legendre_on(ANGULAR, 0.0, PI);
    let dphi = 2.0 * PI / ANGULAR as f64;

    let mut m = Vector3::from_element(Complex64::new(0.0, 0.0));
    for (r, wri) in rs.iter().zip(&wr) {
        let radial = c * spherical_j1(k * *r);
        for (th, wti) in thetas.iter().zip(&wt) {
            let (st, ct) = th.sin_cos();
            for ip in 0..ANGULAR {
                let phi = ip as f64 * dphi;
                let (sp, cp) = phi.sin_cos();
                let rhat = Vector3::new(st * cp, st * sp, ct);
                // ½ r × (B × r̂) scaled by the radial profile
                let cross = (*r * rhat).cross(&b.cross(&rhat));
                let dv = wri * wti * dphi * r * r * st;
                for i in 0..3 {
                    m[i] += radial * (0.5 * cross[i] * dv);
                }
            }
        }
    }
    m
}

/// Average potential energy `−α·BᵀB` (J).
pub fn averaged_energy(alpha: f64, b: &Vector3<f64>) -> f64 {
    -alpha * b.dot(b)
}

/// The 3×5 force packing operator.
pub fn pack_force_matrix(b: &Vector3<f64>) -> ForcePacking {
    let (bx, by, bz) = (b.x, b.y, b.z);
    ForcePacking::from_row_slice(&[
        bx, by, bz, 0.0, 0.0, //
        0.0, bx, 0.0, by, bz, //
        -bz, 0.0, bx, -bz, by,
    ])
}

/// Time-averaged force on the induced dipole, `2α·[B]_f·G` (N).
pub fn induced_force(alpha: f64, field: &FieldState) -> Vector3<f64> {
    2.0 * alpha * pack_force_matrix(&field.field) * field.gradient
}
