//! Rigid transforms and the camera rig model.
//!
//! World coordinates are ENU plus height (x east, y north, z up). Camera
//! frames follow the pinhole convention: x right, y down, z forward. A
//! panorama rig is described by the world→camera rotation of its view 0;
//! view `k` is the rig rotated by `45·k` degrees to the right.

use crate::geodesy::{Bearing, EnuPoint, GeoPoint, LocalFrame};
use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// Height of every camera above the ground plane, in meters.
pub const CAMERA_HEIGHT_M: f64 = 2.5;

/// World→camera transform `X_c = R·X_w + τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Pose of a camera with world→camera rotation `rotation` centred at `center`.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// The 4×4 homogeneous matrix `[[R, τ], [0, 1]]`.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseTransform) -> PoseTransform {
        PoseTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseTransform {
        let rt = self.rotation.transpose();
        PoseTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_so3(&self, tol: f64) -> bool {
        is_rotation(&self.rotation, tol)
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    orth < tol && (r.determinant() - 1.0).abs() < tol
}

/// Nearest rotation in the Frobenius sense.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut m = u * v_t;
    if m.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        m = u * d * v_t;
    }
    m
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `exp([w]ₓ)` for an axis-angle vector `w`.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// World→camera rotation of a level camera looking along `heading`.
pub fn rig_rotation(heading: Bearing) -> Matrix3<f64> {
    let (s, c) = heading.radians().sin_cos();
    Matrix3::new(c, -s, 0.0, 0.0, 0.0, -1.0, s, c, 0.0)
}

/// Rotation taking rig (view 0) coordinates to those of a view yawed
/// `yaw_deg` to the right.
pub fn view_rotation(yaw_deg: f64) -> Matrix3<f64> {
    let (s, c) = yaw_deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

/// Compass heading of the camera's optical axis.
pub fn heading_of(rotation: &Matrix3<f64>) -> Bearing {
    let f = rotation.row(2);
    Bearing::from_direction(f[0], f[1])
}

/// A panorama's metadata pose: GPS position and compass heading of view 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub camera_id: String,
    pub position: GeoPoint,
    #[serde(skip)]
    pub enu: EnuPoint,
    pub heading: Bearing,
    #[serde(default)]
    pub fixed: bool,
}

impl CameraPose {
    pub fn new(camera_id: &str, position: GeoPoint, heading: Bearing, frame: &LocalFrame) -> Self {
        Self {
            camera_id: camera_id.to_string(),
            position,
            enu: frame.project(position),
            heading,
            fixed: false,
        }
    }

    /// Recomputes the ENU cache for `frame`.
    pub fn localize(&mut self, frame: &LocalFrame) {
        self.enu = frame.project(self.position);
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.enu.x, self.enu.y, CAMERA_HEIGHT_M)
    }

    pub fn transform(&self) -> PoseTransform {
        PoseTransform::from_center(rig_rotation(self.heading), self.center())
    }
}
