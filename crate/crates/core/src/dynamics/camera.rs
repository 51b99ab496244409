//! Pinhole cameras, synthetic pixel measurements and DLT triangulation.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Vector2, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fieldmodel::Workspace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("projection {pixel:?} falls outside the image")]
    OutOfFrame { pixel: [f64; 2] },
    #[error("observations do not determine a point")]
    DegenerateGeometry,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("camera rig file: {0}")]
    Io(String),
}

/// `Π` maps homogeneous world points (m) to homogeneous pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct CameraModel {
    projection: Matrix3x4<f64>,
    pixel_sigma: f64,
    /// (width, height) in pixels; valid pixels lie in `[0, w] × [0, h]`.
    image_bounds: (f64, f64),
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    projection: [f64; 12],
    pixel_sigma: f64,
    image_bounds: [f64; 2],
}

impl TryFrom<CameraFile> for CameraModel {
    type Error = CameraError;
    fn try_from(f: CameraFile) -> Result<Self, CameraError> {
        CameraModel::new(
            Matrix3x4::from_row_slice(&f.projection),
            f.pixel_sigma,
            (f.image_bounds[0], f.image_bounds[1]),
        )
    }
}

impl From<CameraModel> for CameraFile {
    fn from(c: CameraModel) -> Self {
        let mut projection = [0.0; 12];
        for r in 0..3 {
            for k in 0..4 {
                projection[4 * r + k] = c.projection[(r, k)];
            }
        }
        CameraFile {
            projection,
            pixel_sigma: c.pixel_sigma,
            image_bounds: [c.image_bounds.0, c.image_bounds.1],
        }
    }
}

impl CameraModel {
    pub fn new(projection: Matrix3x4<f64>, pixel_sigma: f64, image_bounds: (f64, f64)) -> Result<Self, CameraError> {
        if !projection.iter().all(|v| v.is_finite()) {
            return Err(CameraError::InvalidCamera("non-finite projection".into()));
        }
        let m = projection.fixed_view::<3, 3>(0, 0).into_owned();
        let sv = m.singular_values();
        if sv.min() <= 1e-12 * sv.max() {
            return Err(CameraError::InvalidCamera("left 3×3 block of the projection is singular".into()));
        }
        if !(pixel_sigma >= 0.0) {
            return Err(CameraError::InvalidCamera("pixel sigma must be non-negative".into()));
        }
        if !(image_bounds.0 > 0.0 && image_bounds.1 > 0.0) {
            return Err(CameraError::InvalidCamera("image bounds must be positive".into()));
        }
        Ok(Self {
            projection,
            pixel_sigma,
            image_bounds,
        })
    }

    /// Camera at `position` looking at `target` with world `+z` up in the
    /// image, square pixels and the principal point at the image centre.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        focal_px: f64,
        image_bounds: (f64, f64),
        pixel_sigma: f64,
    ) -> Result<Self, CameraError> {
        let forward = (target - position).normalize();
        let right = forward.cross(&Vector3::z());
        if right.norm() < 1e-9 {
            return Err(CameraError::InvalidCamera("viewing direction is vertical".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let k = Matrix3::new(
            focal_px,
            0.0,
            0.5 * image_bounds.0,
            0.0,
            focal_px,
            0.5 * image_bounds.1,
            0.0,
            0.0,
            1.0,
        );
        let mut extrinsic = Matrix3x4::zeros();
        extrinsic.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        extrinsic.set_column(3, &(-rot * position));
        Self::new(k * extrinsic, pixel_sigma, image_bounds)
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    pub fn pixel_sigma(&self) -> f64 {
        self.pixel_sigma
    }

    pub fn image_bounds(&self) -> (f64, f64) {
        self.image_bounds
    }

    /// Signed depth factor; positive in front of the camera.
    fn depth(&self, point: &Vector3<f64>) -> f64 {
        let w = (self.projection.row(2) * point.push(1.0))[0];
        let det = self.projection.fixed_view::<3, 3>(0, 0).determinant();
        w * det.signum()
    }
}

/// Noiseless pixel coordinates of `point`.
pub fn project(cam: &CameraModel, point: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
    if cam.depth(point) <= 0.0 {
        return Err(CameraError::BehindCamera);
    }
    let h = cam.projection * point.push(1.0);
    let px = Vector2::new(h[0] / h[2], h[1] / h[2]);
    let (w, ht) = cam.image_bounds;
    if !(px.x >= 0.0 && px.x <= w && px.y >= 0.0 && px.y <= ht) {
        return Err(CameraError::OutOfFrame { pixel: [px.x, px.y] });
    }
    Ok(px)
}

/// Projection plus independent Gaussian noise of `pixel_sigma` per axis.
pub fn observe<R: Rng + ?Sized>(cam: &CameraModel, point: &Vector3<f64>, rng: &mut R) -> Result<Vector2<f64>, CameraError> {
    let px = project(cam, point)?;
    if cam.pixel_sigma == 0.0 {
        return Ok(px);
    }
    let n = Normal::new(0.0, cam.pixel_sigma).expect("sigma is finite and non-negative");
    Ok(px + Vector2::new(n.sample(rng), n.sample(rng)))
}

/// Linear (DLT) triangulation: the homogeneous point minimising the
/// algebraic residual of `u·π₃ − π₁`, `v·π₃ − π₂` over all views.
pub fn triangulate(observations: &[(&CameraModel, Vector2<f64>)]) -> Result<Vector3<f64>, CameraError> {
    if observations.len() < 2 {
        return Err(CameraError::DegenerateGeometry);
    }
    let mut a = DMatrix::zeros(2 * observations.len(), 4);
    for (i, (cam, px)) in observations.iter().enumerate() {
        let p = &cam.projection;
        for (r, coord) in [px.x, px.y].into_iter().enumerate() {
            let row = coord * p.row(2) - p.row(r);
            let norm = row.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(CameraError::DegenerateGeometry);
            }
            a.row_mut(2 * i + r).copy_from(&(row / norm));
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(CameraError::DegenerateGeometry)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    if sv.len() < 4 || sv[order[2]] <= 1e-10 * sv[order[0]] {
        return Err(CameraError::DegenerateGeometry);
    }
    let x: Vector4<f64> = v_t.row(order[3]).transpose().fixed_rows::<4>(0).into_owned();
    if x[3].abs() <= 1e-12 * x.norm() {
        return Err(CameraError::DegenerateGeometry);
    }
    Ok(Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]))
}

/// First-order covariance (m²) of the triangulated point, propagating
/// independent pixel noise through the inhomogeneous normal equations of
/// the DLT system at `point`.
pub fn triangulation_covariance(
    observations: &[(&CameraModel, Vector2<f64>)],
    point: &Vector3<f64>,
) -> Result<Matrix3<f64>, CameraError> {
    let rows = 2 * observations.len();
    let mut m = DMatrix::zeros(rows, 3);
    let mut noise = DVector::zeros(rows);
    for (i, (cam, px)) in observations.iter().enumerate() {
        let p = &cam.projection;
        let w = (p.row(2) * point.push(1.0))[0];
        for (r, coord) in [px.x, px.y].into_iter().enumerate() {
            let row = coord * p.row(2) - p.row(r);
            for k in 0..3 {
                m[(2 * i + r, k)] = row[k];
            }
            noise[2 * i + r] = (w * cam.pixel_sigma).powi(2);
        }
    }
    let normal = m.transpose() * &m;
    let inv = normal.try_inverse().ok_or(CameraError::DegenerateGeometry)?;
    let middle = m.transpose() * DMatrix::from_diagonal(&noise) * &m;
    let cov = &inv * middle * &inv;
    let cov = Matrix3::from_fn(|r, c| 0.5 * (cov[(r, c)] + cov[(c, r)]));
    Ok(cov)
}

/// Cameras observing the workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

impl CameraRig {
    /// Three cameras 120° apart on a 0.3 m ring around the workspace centre,
    /// pitched 20° down at it, with the workspace spanning about 400 px.
    pub fn default_for(workspace: &Workspace, pixel_sigma: f64) -> Self {
        let radius: f64 = 0.3;
        let height = radius * 20f64.to_radians().tan();
        let bounds = (1280.0, 960.0);
        let focal = 400.0 * radius / (2.0 * workspace.half_extent.max());
        let cameras = (0..3)
            .map(|i| {
                let theta = (30.0 + 120.0 * i as f64).to_radians();
                let pos = workspace.center + Vector3::new(radius * theta.cos(), radius * theta.sin(), height);
                CameraModel::look_at(pos, workspace.center, focal, bounds, pixel_sigma).expect("default camera is valid")
            })
            .collect();
        Self { cameras }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CameraError> {
        let text = std::fs::read_to_string(path).map_err(|e| CameraError::Io(e.to_string()))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, CameraError> {
        serde_json::from_str(text).map_err(|e| CameraError::Io(e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("rig serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CameraError> {
        std::fs::write(path, self.to_json_string() + "\n").map_err(|e| CameraError::Io(e.to_string()))
    }

    /// One noisy view per camera; cameras that cannot see the point drop out.
    pub fn observe_all<R: Rng + ?Sized>(&self, point: &Vector3<f64>, rng: &mut R) -> Vec<(usize, Vector2<f64>)> {
        self.cameras
            .iter()
            .enumerate()
            .filter_map(|(i, cam)| observe(cam, point, rng).ok().map(|px| (i, px)))
            .collect()
    }

    /// Triangulated position and its covariance, or `None` when fewer than
    /// two views are usable.
    pub fn measure<R: Rng + ?Sized>(&self, point: &Vector3<f64>, rng: &mut R) -> Option<PositionMeasurement> {
        let views = self.observe_all(point, rng);
        let obs: Vec<(&CameraModel, Vector2<f64>)> = views.iter().map(|(i, px)| (&self.cameras[*i], *px)).collect();
        let position = triangulate(&obs).ok()?;
        let covariance = triangulation_covariance(&obs, &position).ok()?;
        Some(PositionMeasurement {
            position,
            covariance,
            views: views.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionMeasurement {
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub views: usize,
}
