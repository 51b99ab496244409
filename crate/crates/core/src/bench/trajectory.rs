//! Piecewise-linear position references.

use nalgebra::{Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::fieldmodel::Workspace;

/// Waypoints joined by straight, constant-speed legs. Before the first and
/// after the last waypoint the reference holds still.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, Vector3<f64>)>", into = "Vec<(f64, Vector3<f64>)>")]
pub struct Trajectory {
    waypoints: Vec<(f64, Vector3<f64>)>,
}

impl TryFrom<Vec<(f64, Vector3<f64>)>> for Trajectory {
    type Error = BenchError;
    fn try_from(w: Vec<(f64, Vector3<f64>)>) -> Result<Self, BenchError> {
        Trajectory::new(w)
    }
}

impl From<Trajectory> for Vec<(f64, Vector3<f64>)> {
    fn from(t: Trajectory) -> Self {
        t.waypoints
    }
}

impl Trajectory {
    pub fn new(waypoints: Vec<(f64, Vector3<f64>)>) -> Result<Self, BenchError> {
        if waypoints.is_empty() {
            return Err(BenchError::InvalidTrajectory("no waypoints".into()));
        }
        if !waypoints.iter().all(|(t, p)| t.is_finite() && p.iter().all(|v| v.is_finite())) {
            return Err(BenchError::InvalidTrajectory("non-finite waypoint".into()));
        }
        if waypoints.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(BenchError::InvalidTrajectory("waypoint times must strictly increase".into()));
        }
        Ok(Self { waypoints })
    }

    /// Holds `point` from `t = 0` to `duration`.
    pub fn hold(point: Vector3<f64>, duration: f64) -> Result<Self, BenchError> {
        if duration > 0.0 {
            Self::new(vec![(0.0, point), (duration, point)])
        } else {
            Self::new(vec![(0.0, point)])
        }
    }

    pub fn waypoints(&self) -> &[(f64, Vector3<f64>)] {
        &self.waypoints
    }

    pub fn start_time(&self) -> f64 {
        self.waypoints[0].0
    }

    pub fn end_time(&self) -> f64 {
        self.waypoints[self.waypoints.len() - 1].0
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    /// Index of the leg containing `t`, or `None` outside the time span.
    fn leg(&self, t: f64) -> Option<usize> {
        if t < self.start_time() || t >= self.end_time() {
            return None;
        }
        Some(self.waypoints.partition_point(|w| w.0 <= t) - 1)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        match self.leg(t) {
            Some(i) => {
                let (t0, p0) = self.waypoints[i];
                let (t1, p1) = self.waypoints[i + 1];
                p0 + (p1 - p0) * ((t - t0) / (t1 - t0))
            }
            None if t < self.start_time() => self.waypoints[0].1,
            None => self.waypoints[self.waypoints.len() - 1].1,
        }
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        match self.leg(t) {
            Some(i) => {
                let (t0, p0) = self.waypoints[i];
                let (t1, p1) = self.waypoints[i + 1];
                (p1 - p0) / (t1 - t0)
            }
            None => Vector3::zeros(),
        }
    }

    /// `[position, velocity]` at `t`.
    pub fn state(&self, t: f64) -> Vector6<f64> {
        let p = self.position(t);
        let v = self.velocity(t);
        Vector6::new(p.x, p.y, p.z, v.x, v.y, v.z)
    }

    /// Samples at `start + k/rate` for every tick up to the end time.
    pub fn on_grid(&self, rate: f64) -> Vec<(f64, Vector3<f64>)> {
        (0..tick_count(self.duration(), rate))
            .map(|k| {
                let t = self.start_time() + k as f64 / rate;
                (t, self.position(t))
            })
            .collect()
    }

    pub fn check_inside(&self, workspace: &Workspace) -> Result<(), BenchError> {
        match self.waypoints.iter().find(|(_, p)| !workspace.contains(p)) {
            Some((t, p)) => Err(BenchError::OutsideWorkspace { time: *t, position: *p }),
            None => Ok(()),
        }
    }
}

/// Control ticks covering `[0, duration]` at `rate`, both ends included.
pub fn tick_count(duration: f64, rate: f64) -> usize {
    (duration * rate + 1e-9).floor() as usize + 1
}

/// Parameters of the two-square cube path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubeSpec {
    pub z_lo: f64,
    pub z_hi: f64,
    pub side: f64,
    pub center_xy: Vector2<f64>,
    /// Motion time after settling (s).
    pub total_time: f64,
    pub settle_time: f64,
}

impl CubeSpec {
    /// 10 mm squares at 20 mm and 30 mm, 109 s of motion after 10 s settling.
    pub fn five_coil_default() -> Self {
        Self {
            z_lo: 0.020,
            z_hi: 0.030,
            side: 0.010,
            center_xy: Vector2::zeros(),
            total_time: 109.0,
            settle_time: 10.0,
        }
    }

    /// Squares at 52 mm and 62 mm.
    pub fn four_coil_default() -> Self {
        Self {
            z_lo: 0.052,
            z_hi: 0.062,
            ..Self::five_coil_default()
        }
    }

    pub fn build(&self, workspace: Option<&Workspace>) -> Result<Trajectory, BenchError> {
        cube_trajectory(
            self.z_lo,
            self.z_hi,
            self.side,
            self.center_xy,
            self.total_time,
            self.settle_time,
            workspace,
        )
    }
}

/// Settle at the cube centre, move to a lower corner, trace the lower
/// square, climb, and trace the upper square, all at one constant speed.
pub fn cube_trajectory(
    z_lo: f64,
    z_hi: f64,
    side: f64,
    center_xy: Vector2<f64>,
    total_time: f64,
    settle_time: f64,
    workspace: Option<&Workspace>,
) -> Result<Trajectory, BenchError> {
    if !(z_lo < z_hi) {
        return Err(BenchError::InvalidTrajectory(format!("z_lo {z_lo} must be below z_hi {z_hi}")));
    }
    if !(side >= 0.0 && total_time > 0.0 && settle_time >= 0.0) {
        return Err(BenchError::InvalidTrajectory(
            "side and settle time must be non-negative, total time positive".into(),
        ));
    }
    let h = 0.5 * side;
    let (cx, cy) = (center_xy.x, center_xy.y);
    let centre = Vector3::new(cx, cy, 0.5 * (z_lo + z_hi));
    let corners = |z: f64| {
        [
            Vector3::new(cx - h, cy - h, z),
            Vector3::new(cx + h, cy - h, z),
            Vector3::new(cx + h, cy + h, z),
            Vector3::new(cx - h, cy + h, z),
            Vector3::new(cx - h, cy - h, z),
        ]
    };
    let mut points = vec![centre];
    points.extend(corners(z_lo));
    points.extend(corners(z_hi));

    let length: f64 = points.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let speed = length / total_time;
    let mut waypoints = vec![(0.0, centre)];
    if settle_time > 0.0 {
        waypoints.push((settle_time, centre));
    }
    let mut t = settle_time;
    for w in points.windows(2) {
        let d = (w[1] - w[0]).norm();
        if d == 0.0 {
            continue;
        }
        t += d / speed;
        waypoints.push((t, w[1]));
    }
    if let Some(last) = waypoints.last_mut() {
        // Remove accumulated rounding so the motion ends exactly on time.
        if last.0 > settle_time {
            last.0 = settle_time + total_time;
        }
    }
    if waypoints.len() == 1 {
        waypoints.push((settle_time + total_time, centre));
    }
    let traj = Trajectory::new(waypoints)?;
    if let Some(ws) = workspace {
        traj.check_inside(ws)?;
    }
    Ok(traj)
}
