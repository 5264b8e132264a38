//! Camera geometry and the target-visibility cost.
//!
//! Image coordinates are measured from the image center, so the pinhole model
//! carries no optical-center offsets. The cost `s H s^T` weights the shorter
//! image axis more heavily through `H = h diag(1/columns, 1/rows)`.

use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rotation_partials, rotation_world_body, StateVector, UavState, STATE_DIM};
use crate::error::{Error, Result};

/// Depth below which a projection is treated as behind the camera.
pub const NEAR_PLANE: f64 = 0.01;

pub type ImageJacobian = SMatrix<f64, 2, STATE_DIM>;

/// Intrinsics (without optical center) and body-to-camera extrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    pub focal_x: f64,
    pub focal_y: f64,
    /// Image width in pixels.
    pub columns: f64,
    /// Image height in pixels.
    pub rows: f64,
    /// Camera origin in the body frame.
    pub p_bc: Vector3<f64>,
    /// Camera orientation in the body frame (columns are the camera axes).
    pub r_bc: Matrix3<f64>,
}

impl Default for CameraModel {
    /// Forward-looking 640x480 camera, optical axis along body x, image x to
    /// the right (body -y) and image y down (body -z).
    fn default() -> Self {
        Self {
            focal_x: 300.0,
            focal_y: 300.0,
            columns: 640.0,
            rows: 480.0,
            p_bc: Vector3::zeros(),
            r_bc: forward_camera_rotation(),
        }
    }
}

pub fn forward_camera_rotation() -> Matrix3<f64> {
    Matrix3::from_columns(&[-Vector3::y(), -Vector3::z(), Vector3::x()])
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.focal_x, self.focal_y, self.columns, self.rows];
        if !dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(Error::InvalidConfig("camera focal lengths and image size must be positive".into()));
        }
        let orth = (self.r_bc.transpose() * self.r_bc - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (self.r_bc.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("camera rotation must be a proper rotation".into()));
        }
        Ok(())
    }
}

/// A 3D point of interest in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPoint {
    pub position: Vector3<f64>,
}

impl TargetPoint {
    pub fn new(position: Vector3<f64>) -> Self {
        Self { position }
    }
}

/// Pixel coordinates relative to the image center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    /// Distance from the image center in pixels.
    pub fn norm(&self) -> f64 {
        self.u.hypot(self.v)
    }
}

/// Target position expressed in the camera frame.
pub fn target_in_camera(x: &UavState, cam: &CameraModel, target: &TargetPoint) -> Vector3<f64> {
    let r_wb = rotation_world_body(x.roll, x.pitch, x.yaw);
    let r_wc = r_wb * cam.r_bc;
    r_wc.transpose() * (target.position - (r_wb * cam.p_bc + x.position))
}

/// Pinhole projection. Fails when the point is at or behind the near plane.
pub fn project(p_cl: &Vector3<f64>, cam: &CameraModel) -> Result<ImagePoint> {
    if p_cl.z <= NEAR_PLANE {
        return Err(Error::TargetBehindCamera { depth: p_cl.z });
    }
    Ok(ImagePoint {
        u: cam.focal_x * p_cl.x / p_cl.z,
        v: cam.focal_y * p_cl.y / p_cl.z,
    })
}

/// Projection with the depth clamped to the near plane. The flag reports
/// whether clamping happened.
pub fn project_clamped(p_cl: &Vector3<f64>, cam: &CameraModel) -> (ImagePoint, bool) {
    let clamped = p_cl.z <= NEAR_PLANE;
    let z = p_cl.z.max(NEAR_PLANE);
    (
        ImagePoint {
            u: cam.focal_x * p_cl.x / z,
            v: cam.focal_y * p_cl.y / z,
        },
        clamped,
    )
}

/// `H = h diag(1/columns, 1/rows)`.
pub fn perception_weight(h: f64, cam: &CameraModel) -> Matrix2<f64> {
    Matrix2::new(h / cam.columns, 0.0, 0.0, h / cam.rows)
}

/// `s H s^T`.
pub fn perception_cost(s: &ImagePoint, weight: &Matrix2<f64>) -> f64 {
    let s = s.to_vector();
    (s.transpose() * weight * s)[(0, 0)]
}

/// Projected target and the Jacobian of the (clamped) projection with respect
/// to the nine state components.
pub fn image_point_jacobian(
    x: &UavState,
    cam: &CameraModel,
    target: &TargetPoint,
) -> (ImagePoint, ImageJacobian, bool) {
    let r_wb = rotation_world_body(x.roll, x.pitch, x.yaw);
    let r_wc = r_wb * cam.r_bc;
    let lever = target.position - (r_wb * cam.p_bc + x.position);
    let p_cl = r_wc.transpose() * lever;
    let (s, clamped) = project_clamped(&p_cl, cam);

    // d p_CL / d state (3x9)
    let mut dp = SMatrix::<f64, 3, STATE_DIM>::zeros();
    dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_wc.transpose()));
    let parts = rotation_partials(x.roll, x.pitch, x.yaw);
    for (a, dr) in parts.iter().enumerate() {
        let col = (dr * cam.r_bc).transpose() * lever - r_wc.transpose() * (dr * cam.p_bc);
        dp.set_column(6 + a, &col);
    }

    let mut ds = SMatrix::<f64, 2, 3>::zeros();
    if clamped {
        // depth held at the near plane
        ds[(0, 0)] = cam.focal_x / NEAR_PLANE;
        ds[(1, 1)] = cam.focal_y / NEAR_PLANE;
    } else {
        let z = p_cl.z;
        ds[(0, 0)] = cam.focal_x / z;
        ds[(0, 2)] = -cam.focal_x * p_cl.x / (z * z);
        ds[(1, 1)] = cam.focal_y / z;
        ds[(1, 2)] = -cam.focal_y * p_cl.y / (z * z);
    }
    (s, ds * dp, clamped)
}

/// Gradient of `s H s^T` with respect to the state.
pub fn perception_cost_gradient(
    x: &UavState,
    cam: &CameraModel,
    target: &TargetPoint,
    weight: &Matrix2<f64>,
) -> StateVector {
    let (s, jac, _) = image_point_jacobian(x, cam, target);
    let sv = s.to_vector();
    (jac.transpose() * (weight + weight.transpose()) * sv).into_owned()
}
