use super::pose::PoseTransform;
use super::SfmError;
use crate::panorama::{Intrinsics, PixelCoord};
use nalgebra::{Vector2, Vector3};

/// A pinhole camera with known intrinsics and world→camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedCamera {
    pub pose: PoseTransform,
    pub intrinsics: Intrinsics,
}

impl CalibratedCamera {
    pub fn new(pose: PoseTransform, intrinsics: Intrinsics) -> Self {
        Self { pose, intrinsics }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// Projects a world point; `None` when it is not in front of the camera.
    pub fn project(&self, x: &Vector3<f64>) -> Option<PixelCoord> {
        let p = self.pose.transform_point(x);
        if p.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some(PixelCoord::new(k.cx + k.focal_px * p.x / p.z, k.cy + k.focal_px * p.y / p.z))
    }

    /// Unit direction, in world coordinates, of the ray through pixel `p`.
    pub fn ray(&self, p: PixelCoord) -> Vector3<f64> {
        let n = normalize_pixel(p, &self.intrinsics);
        (self.pose.rotation.transpose() * Vector3::new(n.x, n.y, 1.0)).normalize()
    }
}

/// Image point on the `z = 1` plane of the camera.
pub fn normalize_pixel(p: PixelCoord, k: &Intrinsics) -> Vector2<f64> {
    Vector2::new((p.u - k.cx) / k.focal_px, (p.v - k.cy) / k.focal_px)
}

/// Minimum angle between two viewing rays accepted for triangulation.
pub const MIN_RAY_ANGLE_DEG: f64 = 0.1;

/// A triangulated point with its mean reprojection error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulatedPoint {
    pub point: Vector3<f64>,
    pub reprojection_error_px: f64,
}

/// Midpoint of the common perpendicular of two rays `c + s·d`. Returns the
/// point and the ray parameters `(s, t)`.
pub fn midpoint(
    c1: &Vector3<f64>,
    d1: &Vector3<f64>,
    c2: &Vector3<f64>,
    d2: &Vector3<f64>,
) -> Result<(Vector3<f64>, f64, f64), SfmError> {
    let d1n = d1.normalize();
    let d2n = d2.normalize();
    let angle = d1n.dot(&d2n).clamp(-1.0, 1.0).acos().to_degrees();
    if !(MIN_RAY_ANGLE_DEG..=180.0 - MIN_RAY_ANGLE_DEG).contains(&angle) {
        return Err(SfmError::ParallelRays { angle_deg: angle });
    }
    let w = c1 - c2;
    let a = d1.dot(d1);
    let b = d1.dot(d2);
    let c = d2.dot(d2);
    let d = d1.dot(&w);
    let e = d2.dot(&w);
    let den = a * c - b * b;
    let s = (b * e - c * d) / den;
    let t = (a * e - b * d) / den;
    let p1 = c1 + d1 * s;
    let p2 = c2 + d2 * t;
    Ok(((p1 + p2) * 0.5, s, t))
}

/// Two-view midpoint triangulation of a matched pixel pair.
pub fn triangulate(
    cam_a: &CalibratedCamera,
    cam_b: &CalibratedCamera,
    pa: PixelCoord,
    pb: PixelCoord,
) -> Result<TriangulatedPoint, SfmError> {
    let (point, _, _) = midpoint(&cam_a.center(), &cam_a.ray(pa), &cam_b.center(), &cam_b.ray(pb))?;
    let err = |cam: &CalibratedCamera, p: PixelCoord| {
        cam.project(&point)
            .map(|q| (q.u - p.u).hypot(q.v - p.v))
            .unwrap_or(f64::INFINITY)
    };
    Ok(TriangulatedPoint {
        point,
        reprojection_error_px: 0.5 * (err(cam_a, pa) + err(cam_b, pb)),
    })
}

/// Least-squares point closest to a bundle of rays (centre, direction).
pub fn triangulate_rays(rays: &[(Vector3<f64>, Vector3<f64>)]) -> Option<Vector3<f64>> {
    if rays.len() < 2 {
        return None;
    }
    let mut a = nalgebra::Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (c, d) in rays {
        let d = d.normalize();
        let p = nalgebra::Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * c;
    }
    let chol = a.cholesky()?;
    if a.determinant().abs() < 1e-12 {
        return None;
    }
    Some(chol.solve(&b))
}
