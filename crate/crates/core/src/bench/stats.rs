//! Tracking error, coil power and Welch's two-sample test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::{BenchError, LogRow, RunLog};

/// Which position the tracking error is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorSource {
    /// EKF estimate, as an experimenter would see it.
    #[default]
    Estimated,
    /// Simulated ground truth.
    True,
}

/// Rows strictly after `settle_time`; rows are time-ordered.
pub fn post_settle(log: &RunLog, settle_time: f64) -> &[LogRow] {
    let start = log.rows.partition_point(|r| r.t <= settle_time);
    &log.rows[start..]
}

/// Root-mean-square position error after `settle_time`, in millimetres.
pub fn rmse(log: &RunLog, settle_time: f64, source: ErrorSource) -> Result<f64, BenchError> {
    let rows = post_settle(log, settle_time);
    if rows.is_empty() {
        return Err(BenchError::EmptyWindow { settle_time });
    }
    let sum: f64 = rows
        .iter()
        .map(|r| {
            let p = match source {
                ErrorSource::Estimated => r.estimated_position,
                ErrorSource::True => r.true_position,
            };
            (p - r.desired_position).norm_squared()
        })
        .sum();
    Ok((sum / rows.len() as f64).sqrt() * 1e3)
}

/// Mean of `IᵀI` over the commanded currents (A², i.e. power per ohm).
pub fn mean_power(log: &RunLog) -> Result<f64, BenchError> {
    if log.rows.is_empty() {
        return Err(BenchError::InsufficientSamples("mean power of an empty log".into()));
    }
    let sum: f64 = log.rows.iter().map(|r| r.commanded.norm_squared()).sum();
    Ok(sum / log.rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub dof: f64,
    /// Two-tailed.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test of `mean(a) = mean(b)`.
///
/// With both variances zero the test degenerates: equal means give
/// `p = 1`, different means `p = 0`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult, BenchError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(BenchError::InsufficientSamples(format!(
            "Welch test needs at least two values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(BenchError::InsufficientSamples("non-finite sample value".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let pooled_dof = na + nb - 2.0;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            WelchResult { t: 0.0, dof: pooled_dof, p: 1.0 }
        } else {
            WelchResult {
                t: (ma - mb).signum() * f64::INFINITY,
                dof: pooled_dof,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = if t == 0.0 {
        1.0
    } else {
        beta_reg(0.5 * dof, 0.5, dof / (dof + t * t))
    };
    Ok(WelchResult { t, dof, p })
}
