use inductive_manip::bench::{rmse, CubeSpec, ErrorSource, RunStatus, SolverFlag, Trajectory};
use inductive_manip::control::{
    closed_loop_companion, control_law, run_closed_loop, run_open_loop, synthesize_gains, ControlError,
    ControllerState, Simulation,
};
use inductive_manip::dynamics::{CameraRig, FluidSpec, NoiseSpec, PlantModel};
use inductive_manip::fieldmodel::{DipoleSourceSet, Workspace};
use inductive_manip::inversion::StrategyKind;
use inductive_manip::magnetics::{DriveSpec, SampleSpec};
use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;

fn simulation(noise: NoiseSpec) -> Simulation {
    let ws = Workspace::five_coil_default();
    let plant = PlantModel::new(
        SampleSpec::default_aluminium(),
        FluidSpec::default(),
        DipoleSourceSet::five_coil_default(),
        &DriveSpec::default(),
        &ws,
    )
    .unwrap();
    Simulation::matched(plant, CameraRig::default_for(&ws, noise.pixel_sigma), noise)
}

fn short_path() -> Trajectory {
    Trajectory::new(vec![
        (0.0, Vector3::new(0.0, 0.0, 0.025)),
        (5.0, Vector3::new(0.0, 0.0, 0.025)),
        (10.0, Vector3::new(0.005, 0.0, 0.022)),
        (15.0, Vector3::new(0.005, 0.005, 0.028)),
    ])
    .unwrap()
}

/// Roots of the monic cubic via the companion matrix, compared as a
/// sorted real triple.
fn closed_loop_poles(mass: f64, drag: f64, poles: [f64; 3]) -> Vec<f64> {
    let g = synthesize_gains(mass, drag, poles, 1.0).unwrap();
    let eig = closed_loop_companion(mass, drag, &g, 0).complex_eigenvalues();
    let mut re: Vec<f64> = eig.iter().map(|c| c.re).collect();
    assert!(eig.iter().all(|c| c.im.abs() < 1e-6 * c.re.abs().max(1.0)));
    re.sort_by(|a, b| a.partial_cmp(b).unwrap());
    re
}

#[test]
fn synthesized_gains_place_requested_poles() {
    let sample = SampleSpec::default_aluminium();
    let drag = FluidSpec::default().drag_coefficient(&sample);
    let got = closed_loop_poles(sample.mass, drag, [-4.0, -5.0, -6.0]);
    for (g, want) in got.iter().zip([-6.0, -5.0, -4.0]) {
        assert!((g - want).abs() < 1e-8 * want.abs(), "{g} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pole_placement_holds_for_distinct_real_poles(
        mass in 1e-3f64..1.0,
        drag in 0.0f64..1e-2,
        p1 in 0.5f64..3.0,
        gap1 in 0.5f64..3.0,
        gap2 in 0.5f64..3.0,
    ) {
        let want = [-(p1 + gap1 + gap2), -(p1 + gap1), -p1];
        let got = closed_loop_poles(mass, drag, [-p1, -(p1 + gap1), -(p1 + gap1 + gap2)]);
        for (g, w) in got.iter().zip(want) {
            prop_assert!((g - w).abs() < 1e-8 * w.abs());
        }
    }
}

#[test]
fn integral_action_rejects_constant_disturbance() {
    // Damped double integrator under a constant push, closed by the PID law.
    let (mass, drag) = (8e-3, 2.4e-4);
    let gains = synthesize_gains(mass, drag, [-4.0, -5.0, -6.0], 1.0).unwrap();
    let push = Vector3::new(20e-6, -10e-6, 5e-6);
    let mut ctrl = ControllerState::default();
    let (mut p, mut v) = (Vector3::zeros(), Vector3::<f64>::zeros());
    let dt = 0.02;
    let substeps = 200;
    for _ in 0..1500 {
        let x = Vector6::new(p.x, p.y, p.z, v.x, v.y, v.z);
        let u = control_law(&mut ctrl, &gains, &Vector6::zeros(), &x, dt);
        let h = dt / substeps as f64;
        for _ in 0..substeps {
            let a = (u - drag * v + push) / mass;
            v += a * h;
            p += v * h;
        }
    }
    assert!(p.norm() < 1e-7, "steady offset {p:?}");
}

#[test]
fn noiseless_cube_is_tracked_closely() {
    let sim = simulation(NoiseSpec::noiseless(0));
    let traj = CubeSpec::five_coil_default().build(Some(&Workspace::five_coil_default())).unwrap();
    let log = run_closed_loop(&sim, &StrategyKind::MinDelta, &traj, 1).unwrap();
    assert_eq!(log.status, RunStatus::Completed);
    let e = rmse(&log, 10.0, ErrorSource::True).unwrap();
    assert!(e < 0.2, "rmse {e} mm");
    assert!(log.rows.iter().all(|r| !r.dropout));
}

#[test]
fn seeded_runs_are_reproducible() {
    let sim = simulation(NoiseSpec::default());
    let a = run_closed_loop(&sim, &StrategyKind::MinNorm, &short_path(), 42).unwrap();
    let b = run_closed_loop(&sim, &StrategyKind::MinNorm, &short_path(), 42).unwrap();
    let c = run_closed_loop(&sim, &StrategyKind::MinNorm, &short_path(), 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn weight_misestimate_is_absorbed_by_feedback() {
    let mut sim = simulation(NoiseSpec::default());
    sim.model.sample.effective_weight *= 1.2;
    let log = run_closed_loop(&sim, &StrategyKind::MinDelta, &short_path(), 5).unwrap();
    assert_eq!(log.status, RunStatus::Completed);
    assert!(rmse(&log, 5.0, ErrorSource::True).unwrap() < 1.0);
}

#[test]
fn open_loop_replays_the_schedule() {
    let sim = simulation(NoiseSpec::default());
    let traj = short_path();
    let schedule = sim.openloop_schedule(&traj).unwrap();
    let log = run_open_loop(&sim, &traj, &schedule, 9).unwrap();
    assert_eq!(log.rows.len(), schedule.len());
    for (row, cmd) in log.rows.iter().zip(&schedule) {
        assert_eq!(&row.commanded, cmd);
        assert_eq!(row.solver, SolverFlag::OpenLoop);
    }
    assert!(matches!(run_open_loop(&sim, &traj, &[], 9), Err(ControlError::InvalidConfig(_))));
}

#[test]
fn log_has_one_row_per_tick() {
    let sim = simulation(NoiseSpec::default());
    let log = run_closed_loop(&sim, &StrategyKind::MinDelta, &short_path(), 1).unwrap();
    assert_eq!(log.rows.len(), 751);
    assert!(log.rows.windows(2).all(|w| (w[1].t - w[0].t - 0.02).abs() < 1e-12));
}
