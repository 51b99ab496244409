//! Simulation, control and experiment harness for 3-DOF position control of
//! conductive, non-magnetic spheres driven by induced magnetic dipoles.
//!
//! The crate is layered bottom-up:
//!
//! * [`magnetics`]: induced-dipole gain, averaged energy and force law.
//! * [`fieldmodel`]: point-dipole coil models, actuation matrices and
//!   calibration against field measurements.
//! * [`inversion`]: desired force to coil currents, reference-current
//!   strategies and open-loop stable solutions.
//! * [`dynamics`]: plant equations of motion, Dormand-Prince integration and
//!   synthetic camera measurements.
//! * [`control`]: extended Kalman filter, PID synthesis and the closed and
//!   open-loop drivers.
//! * [`bench`]: trajectories, metrics, statistics, persistence and
//!   experiment orchestration.

pub mod bench;
pub mod control;
pub mod dynamics;
pub mod fieldmodel;
pub mod inversion;
pub mod magnetics;
pub mod quadrature;
