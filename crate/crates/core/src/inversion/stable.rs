//! Current vectors that levitate the sample with a restoring force in every
//! direction, and continuous open-loop schedules built from them.

use nalgebra::{DVector, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::sqp::{solve_currents_with, SolverOptions};
use super::{CurrentVector, InversionError, InversionProblem};
use crate::fieldmodel::{actuation_matrix, DipoleSourceSet, FieldError};

#[derive(Debug, Clone, PartialEq)]
pub struct StableSolution {
    pub currents: CurrentVector,
    /// `∂F/∂p` at the equilibrium (N/m).
    pub force_jacobian: Matrix3<f64>,
}

impl StableSolution {
    /// Largest eigenvalue of the symmetrised position Jacobian.
    pub fn max_eigenvalue(&self) -> f64 {
        symmetric_max_eigenvalue(&self.force_jacobian)
    }

    /// Weakest restoring stiffness (N/m); positive for stable solutions.
    pub fn stability_margin(&self) -> f64 {
        -self.max_eigenvalue()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StableSearchOptions {
    pub n_starts: usize,
    pub seed: u64,
    /// Solutions closer than this in current space are merged (A).
    pub dedup_distance: f64,
    /// Central-difference step for `∂F/∂p` (m).
    pub jacobian_step: f64,
    pub solver: SolverOptions,
}

impl Default for StableSearchOptions {
    fn default() -> Self {
        Self {
            n_starts: 64,
            seed: 7,
            dedup_distance: 1.0,
            jacobian_step: 1e-5,
            solver: SolverOptions {
                max_restarts: 0,
                ..SolverOptions::default()
            },
        }
    }
}

fn symmetric_max_eigenvalue(m: &Matrix3<f64>) -> f64 {
    SymmetricEigen::new(0.5 * (m + m.transpose())).eigenvalues.max()
}

/// Central-difference Jacobian of the induced force with respect to the
/// sample position, currents held fixed.
pub fn position_jacobian(
    set: &DipoleSourceSet,
    point: &Vector3<f64>,
    alpha: f64,
    currents: &CurrentVector,
    step: f64,
) -> Result<Matrix3<f64>, FieldError> {
    let mut jac = Matrix3::zeros();
    for axis in 0..3 {
        let mut e = Vector3::zeros();
        e[axis] = step;
        let up = actuation_matrix(set, &(point + e))?.force(alpha, currents);
        let dn = actuation_matrix(set, &(point - e))?.force(alpha, currents);
        jac.set_column(axis, &((up - dn) / (2.0 * step)));
    }
    Ok(jac)
}

/// Multi-start search for currents producing `required_force` at `point`
/// with a negative-definite position Jacobian.
///
/// Each start minimises the distance to a random reference inside the
/// current box, which steers the solver onto different branches of the
/// solution set. Results are deduplicated and sorted by decreasing
/// stability margin. An empty list is a valid outcome.
pub fn find_stable_currents(
    set: &DipoleSourceSet,
    point: &Vector3<f64>,
    required_force: &Vector3<f64>,
    alpha: f64,
    options: &StableSearchOptions,
) -> Result<Vec<StableSolution>, InversionError> {
    let actuation = actuation_matrix(set, point)?;
    let lo = set.lower_bounds();
    let hi = set.upper_bounds();

    let found: Vec<StableSolution> = (0..options.n_starts)
        .into_par_iter()
        .map(|k| -> Result<Option<StableSolution>, InversionError> {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64));
            let start = DVector::from_fn(lo.len(), |i, _| rng.random_range(lo[i]..=hi[i]));
            let problem = InversionProblem::for_set(set, *point, *required_force, start.clone(), alpha);
            let solver = SolverOptions {
                seed: rng.random(),
                ..options.solver
            };
            let Ok(sol) = solve_currents_with(&problem, &actuation, &start, &solver) else {
                return Ok(None);
            };
            if !sol.is_converged() {
                return Ok(None);
            }
            let jac = position_jacobian(set, point, alpha, &sol.currents, options.jacobian_step)?;
            Ok((symmetric_max_eigenvalue(&jac) < 0.0).then_some(StableSolution {
                currents: sol.currents,
                force_jacobian: jac,
            }))
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();

    // The force is even in I, so every solution has a mirrored twin.
    let mut all: Vec<StableSolution> = found
        .iter()
        .flat_map(|s| {
            let mirrored = StableSolution {
                currents: -&s.currents,
                force_jacobian: s.force_jacobian,
            };
            let in_box = mirrored.currents.iter().enumerate().all(|(i, v)| *v >= lo[i] && *v <= hi[i]);
            std::iter::once(s.clone()).chain(in_box.then_some(mirrored))
        })
        .collect();
    all.sort_by(|a, b| b.stability_margin().total_cmp(&a.stability_margin()));

    let mut unique: Vec<StableSolution> = Vec::new();
    for s in all {
        if unique.iter().all(|u| (&u.currents - &s.currents).norm() >= options.dedup_distance) {
            unique.push(s);
        }
    }
    Ok(unique)
}

/// Reference currents along `path`, one per waypoint.
///
/// The first waypoint takes the stable solution with the largest margin.
/// Each later waypoint takes the stable solution nearest in current space
/// to the previous selection; this is found by re-solving from the previous
/// currents and, if that lands on an unstable point, by a full search.
pub fn openloop_trajectory(
    set: &DipoleSourceSet,
    path: &[(f64, Vector3<f64>)],
    required_force: &Vector3<f64>,
    alpha: f64,
    options: &StableSearchOptions,
) -> Result<Vec<CurrentVector>, InversionError> {
    if path.is_empty() {
        return Err(InversionError::InvalidProblem("path is empty".into()));
    }
    if path.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(InversionError::InvalidProblem("path times must be strictly increasing".into()));
    }

    let first = find_stable_currents(set, &path[0].1, required_force, alpha, options)?;
    let Some(best) = first.into_iter().next() else {
        return Err(InversionError::NoStableSolution {
            index: 0,
            position: path[0].1,
        });
    };
    let mut out = Vec::with_capacity(path.len());
    out.push(best.currents);

    for (index, w) in path.windows(2).enumerate() {
        let index = index + 1;
        let (prev_point, point) = (w[0].1, w[1].1);
        let prev = out.last().expect("trajectory is non-empty").clone();
        if point == prev_point {
            out.push(prev);
            continue;
        }
        let next = match continue_branch(set, &point, required_force, alpha, &prev, options)? {
            Some(c) => c,
            None => {
                let candidates = find_stable_currents(set, &point, required_force, alpha, options)?;
                candidates
                    .into_iter()
                    .min_by(|a, b| (&a.currents - &prev).norm().total_cmp(&(&b.currents - &prev).norm()))
                    .map(|s| s.currents)
                    .ok_or(InversionError::NoStableSolution { index, position: point })?
            }
        };
        out.push(next);
    }
    Ok(out)
}

fn continue_branch(
    set: &DipoleSourceSet,
    point: &Vector3<f64>,
    required_force: &Vector3<f64>,
    alpha: f64,
    prev: &CurrentVector,
    options: &StableSearchOptions,
) -> Result<Option<CurrentVector>, InversionError> {
    let actuation = actuation_matrix(set, point)?;
    let problem = InversionProblem::for_set(set, *point, *required_force, prev.clone(), alpha);
    let Ok(sol) = solve_currents_with(&problem, &actuation, prev, &options.solver) else {
        return Ok(None);
    };
    if !sol.is_converged() {
        return Ok(None);
    }
    let jac = position_jacobian(set, point, alpha, &sol.currents, options.jacobian_step)?;
    Ok((symmetric_max_eigenvalue(&jac) < 0.0).then_some(sol.currents))
}
