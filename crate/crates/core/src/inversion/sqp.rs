//! Sequential quadratic programming for the minimum-weighted-distance
//! current problem with a quadratic force equality and box bounds.
//!
//! Internally currents are divided by the largest bound magnitude and the
//! constraint by the larger of `‖F_d‖` and a natural force scale, so that
//! both the variables and the constraint residual are of order one.

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CurrentVector, InversionError, InversionProblem};
use crate::fieldmodel::ActuationMatrix;

/// Elastic regularisation of the linearised constraint in each QP.
const QP_ELASTIC: f64 = 1e-10;
/// A variable within this (scaled) distance of a bound counts as active.
const BOUND_TOL: f64 = 1e-12;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Random restarts tried when the warm start fails to converge.
    pub max_restarts: usize,
    pub seed: u64,
    /// Bound on the scaled KKT stationarity residual.
    pub stationarity_tolerance: f64,
    pub relative_force_tolerance: f64,
    /// N
    pub absolute_force_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            max_restarts: 8,
            seed: 0x5eed,
            stationarity_tolerance: 1e-8,
            relative_force_tolerance: 1e-6,
            absolute_force_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Force constraint met but stationarity not reached within the
    /// iteration budget; the best feasible iterate is returned.
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub currents: CurrentVector,
    pub status: SolveStatus,
    /// `(I − I_r)ᵀ W (I − I_r)` in A².
    pub objective: f64,
    /// `‖F(I) − F_d‖` in N.
    pub force_residual: f64,
    pub stationarity: f64,
    /// Total SQP iterations over all starts.
    pub iterations: usize,
    /// Random restarts used; zero when the warm start succeeded.
    pub restarts: usize,
}

impl Solution {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Solves the current-allocation problem with default options.
pub fn solve_currents(
    problem: &InversionProblem,
    actuation: &ActuationMatrix,
    warm_start: &CurrentVector,
) -> Result<Solution, InversionError> {
    solve_currents_with(problem, actuation, warm_start, &SolverOptions::default())
}

/// Minimises `(I − I_r)ᵀ W (I − I_r)` subject to the induced force at the
/// actuation point equalling `F_d` and `I_min ≤ I ≤ I_max`.
///
/// Starts from `warm_start` (projected into the box). If that start does not
/// converge, up to `max_restarts` uniform random starts are tried and the
/// converged point with the lowest objective is returned.
pub fn solve_currents_with(
    problem: &InversionProblem,
    actuation: &ActuationMatrix,
    warm_start: &CurrentVector,
    options: &SolverOptions,
) -> Result<Solution, InversionError> {
    problem.validate(actuation.coil_count())?;
    if warm_start.len() != actuation.coil_count() {
        return Err(InversionError::InvalidProblem(format!(
            "warm start has {} entries, expected {}",
            warm_start.len(),
            actuation.coil_count()
        )));
    }
    let scaled = Scaled::new(problem, actuation, options);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let first = scaled.run(&(warm_start / scaled.current_scale), options, &mut rng);
    let mut iterations = first.iterations;
    if first.converged {
        return Ok(scaled.finish(first, iterations, 0));
    }

    let mut best = first;
    let mut restarts = 0;
    for _ in 0..options.max_restarts {
        restarts += 1;
        let x0 = DVector::from_fn(scaled.lo.len(), |i, _| rng.random_range(scaled.lo[i]..=scaled.hi[i]));
        let attempt = scaled.run(&x0, options, &mut rng);
        iterations += attempt.iterations;
        if attempt.better_than(&best) {
            best = attempt;
        }
    }

    if best.feasible {
        Ok(scaled.finish(best, iterations, restarts))
    } else {
        Err(InversionError::Infeasible {
            residual: best.c_norm * scaled.force_scale,
        })
    }
}

#[derive(Debug, Clone)]
struct Attempt {
    x: DVector<f64>,
    objective: f64,
    c_norm: f64,
    stationarity: f64,
    feasible: bool,
    converged: bool,
    iterations: usize,
}

impl Attempt {
    fn better_than(&self, other: &Attempt) -> bool {
        match (self.converged, other.converged) {
            (true, false) => return true,
            (false, true) => return false,
            (true, true) => return self.objective < other.objective,
            _ => {}
        }
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => self.stationarity < other.stationarity,
            (false, false) => self.c_norm < other.c_norm,
        }
    }
}

struct Scaled {
    current_scale: f64,
    force_scale: f64,
    forms: [DMatrix<f64>; 3],
    target: Vector3<f64>,
    weight: DMatrix<f64>,
    xr: DVector<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    /// Scaled constraint-norm tolerance.
    c_tol: f64,
}

impl Scaled {
    fn new(problem: &InversionProblem, actuation: &ActuationMatrix, options: &SolverOptions) -> Self {
        let s = problem
            .lower
            .iter()
            .chain(problem.upper.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-300);
        let raw = actuation.force_forms(problem.alpha);
        let natural = s * s * raw.iter().map(|q| q.norm()).fold(0.0, f64::max);
        let fd_norm = problem.desired_force.norm();
        let force_scale = fd_norm.max(1e-6 * natural).max(1e-300);
        let forms = raw.map(|q| q * (s * s / force_scale));
        let tol = (options.relative_force_tolerance * fd_norm).max(options.absolute_force_tolerance);
        Self {
            current_scale: s,
            force_scale,
            forms,
            target: problem.desired_force / force_scale,
            weight: problem.weight.clone(),
            xr: &problem.reference / s,
            lo: &problem.lower / s,
            hi: &problem.upper / s,
            c_tol: tol / force_scale,
        }
    }

    fn constraint(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(3, |i, _| x.dot(&(&self.forms[i] * x)) - self.target[i])
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3, x.len());
        for i in 0..3 {
            j.row_mut(i).copy_from(&(2.0 * &self.forms[i] * x).transpose());
        }
        j
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.xr;
        d.dot(&(&self.weight * &d))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * &self.weight * (x - &self.xr)
    }

    fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lo[i], self.hi[i]))
    }

    fn merit(&self, x: &DVector<f64>, rho: f64) -> f64 {
        self.objective(x) + rho * self.constraint(x).lp_norm(1)
    }

    fn is_free(&self, x: &DVector<f64>, i: usize) -> bool {
        x[i] > self.lo[i] + BOUND_TOL && x[i] < self.hi[i] - BOUND_TOL
    }

    /// Projected KKT residual for multipliers `lambda`, relative to the
    /// objective gradient.
    fn kkt_residual(&self, x: &DVector<f64>, g: &DVector<f64>, j: &DMatrix<f64>, lambda: &DVector<f64>) -> f64 {
        let r = g + j.transpose() * lambda;
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            let v = if self.hi[i] - self.lo[i] <= BOUND_TOL {
                0.0
            } else if x[i] <= self.lo[i] + BOUND_TOL {
                (-r[i]).max(0.0)
            } else if x[i] >= self.hi[i] - BOUND_TOL {
                r[i].max(0.0)
            } else {
                r[i].abs()
            };
            worst = worst.max(v);
        }
        worst / g.amax().max(1.0)
    }

    /// Least-squares multipliers over the free variables.
    fn ls_multipliers(&self, x: &DVector<f64>, g: &DVector<f64>, j: &DMatrix<f64>) -> DVector<f64> {
        let free: Vec<usize> = (0..x.len()).filter(|&i| self.is_free(x, i)).collect();
        if free.is_empty() {
            return DVector::zeros(3);
        }
        let jf_t = DMatrix::from_fn(free.len(), 3, |r, c| j[(c, free[r])]);
        let gf = DVector::from_fn(free.len(), |r, _| -g[free[r]]);
        jf_t.svd(true, true)
            .solve(&gf, 1e-12 * j.amax().max(1e-300))
            .unwrap_or_else(|_| DVector::zeros(3))
    }

    fn stationarity(&self, x: &DVector<f64>, g: &DVector<f64>, j: &DMatrix<f64>, lambda: &DVector<f64>) -> f64 {
        let ls = self.ls_multipliers(x, g, j);
        self.kkt_residual(x, g, j, &ls).min(self.kkt_residual(x, g, j, lambda))
    }

    fn lagrangian_hessian(&self, lambda: &DVector<f64>, j: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = 2.0 * &self.weight;
        for i in 0..3 {
            h += 2.0 * lambda[i] * &self.forms[i];
        }
        convexify_on_nullspace(h, j, self.weight.norm())
    }

    fn run(&self, x0: &DVector<f64>, options: &SolverOptions, rng: &mut ChaCha8Rng) -> Attempt {
        let n = x0.len();
        let mut x = self.clamp(x0);
        if self.jacobian(&x).amax() < 1e-8 {
            // Force is quadratic, so its Jacobian vanishes at zero current.
            let kick = DVector::from_fn(n, |i, _| 0.05 * (self.hi[i] - self.lo[i]) * rng.random_range(-1.0..1.0));
            x = self.clamp(&(x + kick));
        }
        let mut lambda = DVector::zeros(3);
        let mut rho = 1.0;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < options.max_iterations {
            let c = self.constraint(&x);
            let j = self.jacobian(&x);
            let g = self.gradient(&x);
            let feasible = c.norm() <= self.c_tol;
            if feasible && self.stationarity(&x, &g, &j, &lambda) <= options.stationarity_tolerance {
                converged = true;
                break;
            }
            iterations += 1;

            let h = self.lagrangian_hessian(&lambda, &j);
            let l = &self.lo - &x;
            let u = &self.hi - &x;
            let Some(qp) = solve_box_qp(&h, &g, &j, &c, &l, &u) else {
                break;
            };
            if feasible && self.stationarity(&x, &g, &j, &qp.lambda) <= options.stationarity_tolerance {
                lambda = qp.lambda;
                converged = true;
                break;
            }

            let c1 = c.lp_norm(1);
            let lin1 = (&c + &j * &qp.d).lp_norm(1);
            let gd = g.dot(&qp.d);
            rho = (2.0 * qp.lambda.amax() + 1e-3).max(0.5 * rho);
            let mut slope = gd + rho * (lin1 - c1);
            if slope >= 0.0 && lin1 < c1 {
                rho = 2.0 * gd / (c1 - lin1) + 1.0;
                slope = gd + rho * (lin1 - c1);
            }
            if slope >= 0.0 && qp.d.amax() < 1e-15 {
                break;
            }
            let phi0 = self.objective(&x) + rho * c1;
            let Some(next) = self.line_search(&x, &qp.d, phi0, slope.min(0.0), rho) else {
                break;
            };
            x = next;
            lambda = qp.lambda;
        }

        if !converged {
            self.polish(&mut x);
        }
        let c = self.constraint(&x);
        let j = self.jacobian(&x);
        let g = self.gradient(&x);
        let stationarity = self.stationarity(&x, &g, &j, &lambda);
        let feasible = c.norm() <= self.c_tol;
        Attempt {
            objective: self.objective(&x),
            c_norm: c.norm(),
            stationarity,
            feasible,
            converged: converged || (feasible && stationarity <= options.stationarity_tolerance),
            iterations,
            x,
        }
    }

    fn line_search(&self, x: &DVector<f64>, d: &DVector<f64>, phi0: f64, slope: f64, rho: f64) -> Option<DVector<f64>> {
        let full = self.clamp(&(x + d));
        if self.merit(&full, rho) <= phi0 + ARMIJO * slope {
            return Some(full);
        }
        if let Some(corrected) = self.second_order_correction(&full) {
            if self.merit(&corrected, rho) <= phi0 + ARMIJO * slope {
                return Some(corrected);
            }
        }
        let mut step = 0.5;
        while step > 1e-12 {
            let trial = self.clamp(&(x + step * d));
            if self.merit(&trial, rho) <= phi0 + ARMIJO * step * slope {
                return Some(trial);
            }
            step *= 0.5;
        }
        None
    }

    /// Minimum-norm step over the free variables that cancels the
    /// linearised constraint residual at `x`.
    fn feasibility_step(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let c = self.constraint(x);
        let j = self.jacobian(x);
        let free: Vec<usize> = (0..x.len()).filter(|&i| self.is_free(x, i)).collect();
        if free.is_empty() {
            return None;
        }
        let jf = DMatrix::from_fn(3, free.len(), |r, k| j[(r, free[k])]);
        let step = jf.svd(true, true).solve(&(-&c), 1e-12 * j.amax().max(1e-300)).ok()?;
        let mut out = x.clone();
        for (k, &i) in free.iter().enumerate() {
            out[i] += step[k];
        }
        Some(self.clamp(&out))
    }

    fn second_order_correction(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.feasibility_step(x)
    }

    /// Gauss-Newton steps on the constraint alone, kept only while they
    /// shrink the residual.
    fn polish(&self, x: &mut DVector<f64>) {
        let mut r = self.constraint(x).norm();
        for _ in 0..20 {
            if r <= self.c_tol {
                return;
            }
            let Some(next) = self.feasibility_step(x) else {
                return;
            };
            let rn = self.constraint(&next).norm();
            if !(rn < r) {
                return;
            }
            *x = next;
            r = rn;
        }
    }

    fn finish(&self, attempt: Attempt, iterations: usize, restarts: usize) -> Solution {
        let s = self.current_scale;
        Solution {
            currents: attempt.x * s,
            status: if attempt.converged {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIterations
            },
            objective: attempt.objective * s * s,
            force_residual: attempt.c_norm * self.force_scale,
            stationarity: attempt.stationarity,
            iterations,
            restarts,
        }
    }
}

/// Adds a multiple of the identity so that `H` is positive definite on the
/// null space of `J`.
fn convexify_on_nullspace(h: DMatrix<f64>, j: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let n = h.nrows();
    let floor = 1e-6 * scale.max(1e-12);
    let jtj = SymmetricEigen::new(j.transpose() * j);
    let top = jtj.eigenvalues.amax();
    let null: Vec<usize> = (0..n).filter(|&i| jtj.eigenvalues[i] <= 1e-10 * top.max(1e-300)).collect();
    let min_eig = if null.is_empty() {
        f64::INFINITY
    } else {
        let z = DMatrix::from_fn(n, null.len(), |r, c| jtj.eigenvectors[(r, null[c])]);
        let reduced = z.transpose() * &h * &z;
        SymmetricEigen::new(0.5 * (&reduced + reduced.transpose())).eigenvalues.min()
    };
    let mut h = h;
    if min_eig < floor {
        for i in 0..n {
            h[(i, i)] += floor - min_eig;
        }
    }
    h
}

struct QpStep {
    d: DVector<f64>,
    lambda: DVector<f64>,
}

#[derive(Clone, Copy, PartialEq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Primal active-set solution of
/// `min ½dᵀHd + gᵀd + ‖Jd + c‖²/(2ε)` over `l ≤ d ≤ u`, which is the
/// equality-constrained QP when the linearisation is consistent and its
/// least-squares relaxation otherwise. Requires `l ≤ 0 ≤ u`.
fn solve_box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    j: &DMatrix<f64>,
    c: &DVector<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
) -> Option<QpStep> {
    let n = g.len();
    let mut d = DVector::zeros(n);
    let mut state: Vec<Bound> = (0..n)
        .map(|i| {
            if l[i] >= -BOUND_TOL {
                Bound::Lower
            } else if u[i] <= BOUND_TOL {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    for i in 0..n {
        match state[i] {
            Bound::Lower => d[i] = l[i],
            Bound::Upper => d[i] = u[i],
            Bound::Free => {}
        }
    }
    let gscale = 1e-12 * (1.0 + g.amax());

    for _ in 0..(10 * n + 50) {
        let (target, lambda) = solve_face(h, g, j, c, &d, &state)?;
        let p = &target - &d;
        if p.amax() > 1e-14 * (1.0 + d.amax()) {
            let mut step = 1.0;
            let mut block = None;
            for i in 0..n {
                if state[i] != Bound::Free {
                    continue;
                }
                if p[i] < 0.0 {
                    let a = (l[i] - d[i]) / p[i];
                    if a < step {
                        step = a;
                        block = Some((i, Bound::Lower));
                    }
                } else if p[i] > 0.0 {
                    let a = (u[i] - d[i]) / p[i];
                    if a < step {
                        step = a;
                        block = Some((i, Bound::Upper));
                    }
                }
            }
            d += step.max(0.0) * p;
            if let Some((i, side)) = block {
                state[i] = side;
                d[i] = if side == Bound::Lower { l[i] } else { u[i] };
            }
            continue;
        }

        let grad = h * &d + g + j.transpose() * &lambda;
        let mut release = None;
        let mut worst = gscale;
        for i in 0..n {
            if u[i] - l[i] <= BOUND_TOL {
                continue;
            }
            let violation = match state[i] {
                Bound::Lower => -grad[i],
                Bound::Upper => grad[i],
                Bound::Free => 0.0,
            };
            if violation > worst {
                worst = violation;
                release = Some(i);
            }
        }
        match release {
            Some(i) => state[i] = Bound::Free,
            None => return Some(QpStep { d: target, lambda }),
        }
    }
    None
}

/// Minimiser over the free variables with the others held at `d`, and the
/// associated constraint multipliers.
fn solve_face(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    j: &DMatrix<f64>,
    c: &DVector<f64>,
    d: &DVector<f64>,
    state: &[Bound],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = g.len();
    let m = j.nrows();
    let free: Vec<usize> = (0..n).filter(|&i| state[i] == Bound::Free).collect();
    let nf = free.len();
    let mut fixed_d = d.clone();
    for &i in &free {
        fixed_d[i] = 0.0;
    }
    let hd = h * &fixed_d;
    let jd = j * &fixed_d;

    let mut kkt = DMatrix::zeros(nf + m, nf + m);
    let mut rhs = DVector::zeros(nf + m);
    for (a, &i) in free.iter().enumerate() {
        for (b, &k) in free.iter().enumerate() {
            kkt[(a, b)] = h[(i, k)];
        }
        for r in 0..m {
            kkt[(a, nf + r)] = j[(r, i)];
            kkt[(nf + r, a)] = j[(r, i)];
        }
        rhs[a] = -g[i] - hd[i];
    }
    for r in 0..m {
        kkt[(nf + r, nf + r)] = -QP_ELASTIC;
        rhs[nf + r] = -c[r] - jd[r];
    }
    let sol = kkt.clone().lu().solve(&rhs).or_else(|| {
        let mut reg = kkt;
        for a in 0..nf {
            reg[(a, a)] += 1e-8 * (1.0 + h.amax());
        }
        reg.lu().solve(&rhs)
    })?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut target = fixed_d;
    for (a, &i) in free.iter().enumerate() {
        target[i] = sol[a];
    }
    Some((target, sol.rows(nf, m).into_owned()))
}
