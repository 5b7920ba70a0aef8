//! Camera pose denoising: two-view epipolar geometry, triangulation and a
//! GPS-fused bundle adjustment over panorama rigs.

mod bundle;
mod camera;
mod driver;
mod essential;
mod pose;

pub use bundle::{
    bundle_adjust, heading_residual, reprojection_residual, tilt_residual, BaCamera, BundleOptions,
    BundleReport, BundleResult, Observation, ReprojectionJacobian, Termination, Track,
};
pub use camera::{
    midpoint, normalize_pixel, triangulate, triangulate_rays, CalibratedCamera, TriangulatedPoint,
    MIN_RAY_ANGLE_DEG,
};
pub use driver::{
    refine_poses, CorrectionMode, CorrectionReport, PairDiagnostic, PoseCorrection, RefineOptions,
};
pub use essential::{
    decompose_essential, eight_point, estimate_essential, project_to_essential, sampson_distance,
    EssentialEstimate, EssentialMatrix, RansacOptions,
};
pub use pose::{
    exp_so3, heading_of, is_rotation, orthonormalize, rig_rotation, rotation_angle, skew,
    view_rotation, CameraPose, PoseTransform, CAMERA_HEIGHT_M,
};

use crate::panorama::PixelCoord;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SfmError {
    #[error("degenerate epipolar estimate: {consensus} consensus pairs, need 8")]
    Degenerate { consensus: usize },
    #[error("median parallax {parallax_deg:.3} deg below {min_deg} deg (pure rotation)")]
    PureRotation { parallax_deg: f64, min_deg: f64 },
    #[error("no pose candidate places a strict majority of points in front of both cameras (best {best} of {total})")]
    AmbiguousCheirality { best: usize, total: usize },
    #[error("rays are parallel ({angle_deg:.4} deg apart)")]
    ParallelRays { angle_deg: f64 },
    #[error("bundle adjustment diverged: damping {damping:e} exceeded ceiling without an accepted step")]
    Diverged { damping: f64 },
    #[error("normal equations singular after damping")]
    RankDeficient,
    #[error("view graph is disconnected; unreachable cameras: {0:?}")]
    DisconnectedGraph(Vec<String>),
    #[error("invalid bundle adjustment input: {0}")]
    InvalidInput(String),
}

/// A rectilinear view, `[panorama_id, view_index]` on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewRef(pub String, pub u8);

/// Matched pixels between two views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub view_a: ViewRef,
    pub view_b: ViewRef,
    /// `[ua, va, ub, vb]` per match.
    pub matches: Vec<[f64; 4]>,
}

impl Correspondence {
    pub fn pairs(&self) -> impl Iterator<Item = (PixelCoord, PixelCoord)> + '_ {
        self.matches
            .iter()
            .map(|m| (PixelCoord::new(m[0], m[1]), PixelCoord::new(m[2], m[3])))
    }
}
