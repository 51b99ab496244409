//! Dormand-Prince 5(4) embedded Runge-Kutta pair.

use nalgebra::DVector;

use super::DynamicsError;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last row of `A`, so the pair is FSAL).
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub absolute: f64,
    pub relative: f64,
    /// Upper bound on internal steps per call.
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            absolute: 1e-10,
            relative: 1e-8,
            max_steps: 100_000,
        }
    }
}

/// Accepted internal steps of one adaptive call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub steps: Vec<f64>,
    pub rejected: usize,
}

/// Advances `y` from `t0` by `dt` with adaptive Dormand-Prince steps.
///
/// `h_hint` seeds the first trial step and receives the suggested next
/// step on return, so consecutive calls keep their step size.
pub fn integrate_dp5<F>(
    mut f: F,
    t0: f64,
    y0: &DVector<f64>,
    dt: f64,
    tol: &Tolerances,
    h_hint: &mut f64,
) -> Result<(DVector<f64>, StepReport), DynamicsError>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, DynamicsError>,
{
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::InvalidParameter(format!("integration interval must be positive, got {dt}")));
    }
    let t_end = t0 + dt;
    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = f(t, &y)?;
    let mut h = if *h_hint > 0.0 && h_hint.is_finite() { *h_hint } else { dt };
    let mut report = StepReport::default();
    let h_min = 1e-14 * t_end.abs().max(dt).max(1.0);

    while t < t_end {
        if report.steps.len() + report.rejected >= tol.max_steps {
            return Err(DynamicsError::StepSizeUnderflow { time: t });
        }
        let remaining = t_end - t;
        let last = h >= remaining;
        let step = if last { remaining } else { h };
        let (y_new, k7, err) = dp5_stage(&mut f, t, &y, &k1, step, Some(tol))?;
        if err <= 1.0 {
            t = if last { t_end } else { t + step };
            y = y_new;
            k1 = k7;
            report.steps.push(step);
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if !last || step == h {
                h = step * grow;
            }
        } else {
            report.rejected += 1;
            h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            if !h.is_finite() || h < h_min {
                return Err(DynamicsError::StepSizeUnderflow { time: t });
            }
        }
    }
    *h_hint = h;
    Ok((y, report))
}

/// Advances `y` through the given step sizes without error control. With a
/// fixed schedule the map from `y0` to the result is smooth, which is what
/// finite-difference linearisation needs.
pub fn integrate_steps<F>(mut f: F, t0: f64, y0: &DVector<f64>, steps: &[f64]) -> Result<DVector<f64>, DynamicsError>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, DynamicsError>,
{
    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = f(t, &y)?;
    for &h in steps {
        let (y_new, k7, _) = dp5_stage(&mut f, t, &y, &k1, h, None)?;
        y = y_new;
        k1 = k7;
        t += h;
    }
    Ok(y)
}

/// One Dormand-Prince step. Returns the fifth-order solution, the
/// derivative there, and the scaled error norm when `tol` is given.
fn dp5_stage<F>(
    f: &mut F,
    t: f64,
    y: &DVector<f64>,
    k1: &DVector<f64>,
    h: f64,
    tol: Option<&Tolerances>,
) -> Result<(DVector<f64>, DVector<f64>, f64), DynamicsError>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, DynamicsError>,
{
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
    k.push(k1.clone());
    for s in 1..7 {
        let mut ys = y.clone();
        for (j, kj) in k.iter().enumerate() {
            if A[s][j] != 0.0 {
                ys.axpy(h * A[s][j], kj, 1.0);
            }
        }
        let ks = f(t + C[s] * h, &ys)?;
        if !ks.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::NonFinite("state derivative"));
        }
        k.push(ks);
    }
    let mut y_new = y.clone();
    for (s, ks) in k.iter().enumerate() {
        if B5[s] != 0.0 {
            y_new.axpy(h * B5[s], ks, 1.0);
        }
    }
    let err = match tol {
        None => 0.0,
        Some(tol) => {
            let mut e = DVector::zeros(y.len());
            for (s, ks) in k.iter().enumerate() {
                if E[s] != 0.0 {
                    e.axpy(h * E[s], ks, 1.0);
                }
            }
            let n = y.len().max(1) as f64;
            let sum: f64 = (0..y.len())
                .map(|i| {
                    let scale = tol.absolute + tol.relative * y[i].abs().max(y_new[i].abs());
                    (e[i] / scale).powi(2)
                })
                .sum();
            (sum / n).sqrt()
        }
    };
    let k7 = k.pop().expect("seven stages");
    Ok((y_new, k7, err))
}
