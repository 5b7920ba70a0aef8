//! Occupancy reasoning over intersecting detection rays.
//!
//! Every detection casts a ray on the ground plane from its camera. Pairs of
//! rays meet at intersection nodes, and a binary Markov random field decides
//! which nodes hold an object.

mod energy;
mod graph;
mod solve;

pub use energy::{energy, node_unary, ray_cost};
pub use graph::{build_intersection_graph, intersect_rays, IntersectionNode, RayGraph};
pub use solve::{solve_exhaustive, solve_icm, solve_mrf, MAX_EXHAUSTIVE_NODES};

use crate::geodesy::{Bearing, EnuPoint};
use crate::panorama::{pixel_to_bearing, PanoramaError, PixelCoord, ViewGeometry};
use crate::sfm::CameraPose;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MrfError {
    #[error("detection {index} references unknown camera {camera_id:?}")]
    UnknownCamera { index: usize, camera_id: String },
    #[error("detection {index}: {source}")]
    BadPixel {
        index: usize,
        #[source]
        source: PanoramaError,
    },
    #[error("detection {index} has invalid depth {depth}")]
    BadDepth { index: usize, depth: f64 },
    #[error("labeling has {labels} labels for {nodes} nodes")]
    LabelMismatch { labels: usize, nodes: usize },
}

/// Where a detection sits: a pixel of a rectilinear view, or a bearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectionGeometry {
    Pixel { view_index: u8, pixel: [f64; 2] },
    Bearing { bearing_deg: f64 },
}

/// One segmented object seen from one panorama, with its monocular depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub camera_id: String,
    #[serde(flatten)]
    pub geometry: DetectionGeometry,
    pub depth_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRay {
    pub ray_id: usize,
    pub camera_id: String,
    pub origin: EnuPoint,
    pub bearing: Bearing,
    pub depth_estimate: f64,
}

impl ObservationRay {
    pub fn direction(&self) -> (f64, f64) {
        self.bearing.to_direction()
    }

    pub fn point_at(&self, d: f64) -> EnuPoint {
        let (e, n) = self.direction();
        EnuPoint::new(self.origin.x + d * e, self.origin.y + d * n)
    }
}

/// Binary occupancy per graph node, `true` meaning an object is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub labels: Vec<bool>,
}

impl Labeling {
    pub fn zeros(n: usize) -> Self {
        Self { labels: vec![false; n] }
    }

    pub fn ones(n: usize) -> Self {
        Self { labels: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &z)| z).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    /// Spread of the monocular depth error, meters.
    pub depth_sigma: f64,
    /// Cost per extra occupied node on one ray.
    pub pairwise_penalty: f64,
    /// Cost of a ray that explains no object.
    pub occupancy_bias: f64,
    /// Smallest accepted angle between intersecting rays, degrees.
    pub min_angle: f64,
    /// Farthest accepted intersection along either ray, meters.
    pub max_depth: f64,
    pub seed: u64,
    /// Random restarts of the local search on large graphs.
    pub restarts: usize,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            depth_sigma: 2.0,
            pairwise_penalty: 2.0,
            occupancy_bias: 1.0,
            min_angle: 10.0,
            max_depth: 25.0,
            seed: 0,
            restarts: 32,
        }
    }
}

/// Turns detections into ground-plane rays from the (localized) camera poses.
pub fn cast_rays(
    detections: &[Detection],
    poses: &[CameraPose],
    geometry: &ViewGeometry,
) -> Result<Vec<ObservationRay>, MrfError> {
    let by_id: HashMap<&str, &CameraPose> = poses.iter().map(|p| (p.camera_id.as_str(), p)).collect();
    detections
        .iter()
        .enumerate()
        .map(|(index, det)| {
            let pose = by_id.get(det.camera_id.as_str()).ok_or_else(|| MrfError::UnknownCamera {
                index,
                camera_id: det.camera_id.clone(),
            })?;
            if !(det.depth_m.is_finite() && det.depth_m > 0.0) {
                return Err(MrfError::BadDepth { index, depth: det.depth_m });
            }
            let bearing = match det.geometry {
                DetectionGeometry::Bearing { bearing_deg } => Bearing::new(bearing_deg),
                DetectionGeometry::Pixel { view_index, pixel } => {
                    let view = geometry
                        .view(&det.camera_id, view_index)
                        .map_err(|source| MrfError::BadPixel { index, source })?;
                    pixel_to_bearing(&view, pose.heading, PixelCoord::new(pixel[0], pixel[1]))
                        .map_err(|source| MrfError::BadPixel { index, source })?
                }
            };
            Ok(ObservationRay {
                ray_id: index,
                camera_id: det.camera_id.clone(),
                origin: pose.enu,
                bearing,
                depth_estimate: det.depth_m,
            })
        })
        .collect()
}
