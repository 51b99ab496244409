use inductive_manip::fieldmodel::{actuation_matrix, CoilModel, DipoleSource, DipoleSourceSet, Workspace};
use inductive_manip::inversion::{
    count_switches, find_stable_currents, openloop_trajectory, solve_currents, InversionError, InversionProblem,
    StableSearchOptions,
};
use inductive_manip::magnetics::{dipole_gain, induced_force, DriveSpec, SampleSpec};
use nalgebra::{DVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn alpha() -> f64 {
    dipole_gain(&SampleSpec::default_aluminium(), &DriveSpec::default()).unwrap().alpha
}

fn support() -> Vector3<f64> {
    SampleSpec::default_aluminium().support_force()
}

fn random_point(rng: &mut ChaCha8Rng, ws: &Workspace) -> Vector3<f64> {
    ws.center + Vector3::from_fn(|i, _| rng.random_range(-0.8..0.8) * ws.half_extent[i])
}

fn independent_force(set: &DipoleSourceSet, p: &Vector3<f64>, currents: &DVector<f64>) -> Vector3<f64> {
    induced_force(alpha(), &set.field_state(currents, p).unwrap())
}

#[test]
fn feasible_reference_is_returned_unchanged() {
    let set = DipoleSourceSet::five_coil_default();
    let p = Vector3::new(0.003, -0.002, 0.024);
    let a = actuation_matrix(&set, &p).unwrap();
    let ir = DVector::from_vec(vec![30.0, -20.0, 10.0, 25.0, -40.0]);
    let fd = a.force(alpha(), &ir);
    let prob = InversionProblem::for_set(&set, p, fd, ir.clone(), alpha());
    let sol = solve_currents(&prob, &a, &ir).unwrap();
    assert!(sol.is_converged());
    assert!((&sol.currents - &ir).norm() < 1e-9);
    assert!(sol.objective < 1e-18);
}

/// Two coaxial coils, sample on the axis: only the axial force is nonzero
/// and `F_z = I₁²a + 2I₁I₂b + I₂²c`. For each `I₁` on a 0.1 A grid the
/// constraint is solved exactly for `I₂`, giving a brute-force optimum.
#[test]
fn collinear_pair_matches_grid_search() {
    let set = DipoleSourceSet::new(vec![
        CoilModel::single(DipoleSource::new(Vector3::new(0.0, 0.0, -0.05), Vector3::new(0.0, 0.0, 0.08))),
        CoilModel::single(DipoleSource::new(Vector3::new(0.0, 0.0, 0.09), Vector3::new(0.0, 0.0, 0.08))),
    ])
    .unwrap();
    let p = Vector3::new(0.0, 0.0, 0.01);
    let a = actuation_matrix(&set, &p).unwrap();
    let al = alpha();
    let forms = a.force_forms(al);
    let (qa, qb, qc) = (forms[2][(0, 0)], forms[2][(0, 1)], forms[2][(1, 1)]);

    for (fz, ir) in [(56e-6, [10.0, -5.0]), (-30e-6, [0.0, 0.0]), (56e-6, [-60.0, 40.0])] {
        let ir = DVector::from_vec(ir.to_vec());
        let fd = Vector3::new(0.0, 0.0, fz);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for k in 0..=2000 {
            let i1 = -100.0 + 0.1 * k as f64;
            // qc·I₂² + 2qb·I₁·I₂ + qa·I₁² − F = 0
            let (aa, bb, cc) = (qc, 2.0 * qb * i1, qa * i1 * i1 - fz);
            let disc = bb * bb - 4.0 * aa * cc;
            if disc < 0.0 {
                continue;
            }
            for i2 in [(-bb + disc.sqrt()) / (2.0 * aa), (-bb - disc.sqrt()) / (2.0 * aa)] {
                if i2.abs() <= 100.0 {
                    let obj = (i1 - ir[0]).powi(2) + (i2 - ir[1]).powi(2);
                    if obj < best.0 {
                        best = (obj, i1, i2);
                    }
                }
            }
        }
        let prob = InversionProblem::for_set(&set, p, fd, ir.clone(), al);
        let warm = DVector::from_vec(vec![best.1 + 3.0, best.2 - 3.0]);
        let sol = solve_currents(&prob, &a, &warm).unwrap();
        assert!(sol.force_residual <= 1e-6 * fz.abs(), "residual {}", sol.force_residual);
        // Grid spacing 0.1 A bounds the brute-force objective error.
        let slack = 2.0 * 0.1 * best.0.sqrt() + 0.01;
        assert!(sol.objective <= best.0 + 1e-9, "solver {} grid {}", sol.objective, best.0);
        assert!(sol.objective >= best.0 - slack, "solver {} grid {}", sol.objective, best.0);
        let fz_indep = independent_force(&set, &p, &sol.currents).z;
        assert!((fz_indep - fz).abs() <= 1e-6 * fz.abs());
    }
}

#[test]
fn unreachable_force_is_infeasible() {
    let set = DipoleSourceSet::five_coil_default();
    let p = Vector3::new(0.0, 0.0, 0.025);
    let a = actuation_matrix(&set, &p).unwrap();
    let prob = InversionProblem::for_set(&set, p, Vector3::new(0.0, 0.0, 5.0), DVector::zeros(5), alpha());
    let warm = DVector::from_element(5, 10.0);
    assert!(matches!(solve_currents(&prob, &a, &warm), Err(InversionError::Infeasible { .. })));
}

#[test]
fn min_norm_uses_less_power_than_min_delta() {
    let set = DipoleSourceSet::five_coil_default();
    let ws = Workspace::five_coil_default();
    let al = alpha();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut norm_power, mut delta_power, mut runs) = (0.0, 0.0, 0);
    for _ in 0..40 {
        let p = random_point(&mut rng, &ws);
        let a = actuation_matrix(&set, &p).unwrap();
        let prev = DVector::from_fn(5, |_, _| rng.random_range(-60.0..60.0));
        let fd = support() + Vector3::from_fn(|_, _| rng.random_range(-20e-6..20e-6));
        let delta = solve_currents(&InversionProblem::for_set(&set, p, fd, prev.clone(), al), &a, &prev);
        let norm = solve_currents(&InversionProblem::for_set(&set, p, fd, DVector::zeros(5), al), &a, &prev);
        if let (Ok(d), Ok(n)) = (delta, norm) {
            if d.is_converged() && n.is_converged() {
                delta_power += d.currents.norm_squared();
                norm_power += n.currents.norm_squared();
                runs += 1;
            }
        }
    }
    assert!(runs >= 20, "only {runs} feasible runs");
    assert!(norm_power <= delta_power);
}

#[test]
fn four_coil_centre_has_several_stable_solutions() {
    let set = DipoleSourceSet::four_coil_default();
    let ws = Workspace::four_coil_default();
    let sols = find_stable_currents(&set, &ws.center, &support(), alpha(), &StableSearchOptions::default()).unwrap();
    assert!(sols.len() >= 2, "found {}", sols.len());
    for s in &sols {
        assert!(s.max_eigenvalue() < 0.0);
        let f = independent_force(&set, &ws.center, &s.currents);
        assert!((f - support()).norm() <= 1e-6 * support().norm());
    }
    for (i, a) in sols.iter().enumerate() {
        for b in &sols[i + 1..] {
            assert!((&a.currents - &b.currents).norm() >= 1.0);
        }
    }
}

#[test]
fn static_path_gives_constant_schedule() {
    let set = DipoleSourceSet::five_coil_default();
    let p = Vector3::new(0.0, 0.0, 0.025);
    let path: Vec<_> = (0..10).map(|k| (k as f64 * 0.02, p)).collect();
    let sched = openloop_trajectory(&set, &path, &support(), alpha(), &StableSearchOptions::default()).unwrap();
    assert_eq!(sched.len(), 10);
    assert!(sched.iter().all(|c| c == &sched[0]));
}

#[test]
fn path_through_unsupportable_point_fails() {
    let set = DipoleSourceSet::five_coil_default();
    // Far above the array the field cannot hold the sample up.
    let path = vec![(0.0, Vector3::new(0.0, 0.0, 0.4)), (0.02, Vector3::new(0.0, 0.0, 0.401))];
    assert!(matches!(
        openloop_trajectory(&set, &path, &support(), alpha(), &StableSearchOptions::default()),
        Err(InversionError::NoStableSolution { index: 0, .. })
    ));
}

#[test]
fn short_segment_schedule_is_continuous() {
    let set = DipoleSourceSet::five_coil_default();
    let a = Vector3::new(-0.005, -0.005, 0.02);
    let b = Vector3::new(0.005, -0.005, 0.02);
    let path: Vec<_> = (0..=100)
        .map(|k| {
            let s = k as f64 / 100.0;
            (k as f64 * 0.02, a + s * (b - a))
        })
        .collect();
    let sched = openloop_trajectory(&set, &path, &support(), alpha(), &StableSearchOptions::default()).unwrap();
    let times: Vec<f64> = path.iter().map(|w| w.0).collect();
    assert_eq!(count_switches(&times, &sched, 20.0), 0);
    let max_jump = sched.windows(2).map(|w| (&w[1] - &w[0]).amax()).fold(0.0, f64::max);
    assert!(max_jump < 5.0, "max jump {max_jump}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solutions_respect_bounds_and_force(
        seed in any::<u64>(),
        fx in -20e-6..20e-6f64,
        fy in -20e-6..20e-6f64,
        fz in -20e-6..20e-6f64,
    ) {
        let set = DipoleSourceSet::five_coil_default();
        let ws = Workspace::five_coil_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_point(&mut rng, &ws);
        let a = actuation_matrix(&set, &p).unwrap();
        let ir = DVector::from_fn(5, |_, _| rng.random_range(-50.0..50.0));
        let fd = support() + Vector3::new(fx, fy, fz);
        let prob = InversionProblem::for_set(&set, p, fd, ir.clone(), alpha());
        if let Ok(sol) = solve_currents(&prob, &a, &ir) {
            prop_assert!(sol.currents.iter().all(|v| *v >= -100.0 - 1e-9 && *v <= 100.0 + 1e-9));
            let resid = (independent_force(&set, &p, &sol.currents) - fd).norm();
            prop_assert!(resid <= (1e-6 * fd.norm()).max(1e-12) * 1.0001, "residual {}", resid);

            // Mirror symmetry of the quadratic force.
            let mirrored = InversionProblem::for_set(&set, p, fd, -&ir, alpha());
            let msol = solve_currents(&mirrored, &a, &(-&sol.currents)).unwrap();
            prop_assert!((msol.objective - sol.objective).abs() <= 1e-6 * sol.objective.max(1.0));
        }
    }

    #[test]
    fn switch_count_invariant_under_time_shift(
        values in prop::collection::vec(-100.0..100.0f64, 2..80),
        shift in -1e3..1e3f64,
    ) {
        let times: Vec<f64> = (0..values.len()).map(|k| k as f64 * 0.02).collect();
        let shifted: Vec<f64> = times.iter().map(|t| t + shift).collect();
        let currents: Vec<DVector<f64>> = values.iter().map(|&v| DVector::from_vec(vec![v, -v * 0.5])).collect();
        // Quantise the shift so that pairwise differences are exact.
        let _ = shifted;
        let q = (shift / 0.02).round() * 0.02;
        let shifted: Vec<f64> = (0..values.len()).map(|k| (k as f64 + q / 0.02) * 0.02).collect();
        prop_assert_eq!(count_switches(&times, &currents, 20.0), count_switches(&shifted, &currents, 20.0));
    }
}
