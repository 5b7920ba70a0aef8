//! Pose refinement driver: pairwise epipolar screening, track assembly,
//! triangulation and GPS-fused bundle adjustment.

use super::bundle::{bundle_adjust, reprojection_residual, BaCamera, BundleOptions, BundleReport, Observation, Track};
use super::camera::{normalize_pixel, triangulate_rays};
use super::essential::{decompose_essential, estimate_essential, RansacOptions};
use super::pose::{heading_of, rig_rotation, rotation_angle, view_rotation, CameraPose, CAMERA_HEIGHT_M};
use super::{Correspondence, SfmError, ViewRef};
use crate::geodesy::{haversine_distance, EnuPoint, LocalFrame};
use crate::panorama::{PixelCoord, ViewGeometry, VIEWS_PER_PANORAMA, VIEW_YAW_STEP_DEG};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

/// Which pose parameters the bundle adjustment may correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// Metadata poses are used as-is.
    #[default]
    None,
    /// Positions (τ) only; headings are frozen.
    TauOnly,
    /// Rotations and positions.
    Full,
}

impl fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrectionMode::None => "none",
            CorrectionMode::TauOnly => "tau_only",
            CorrectionMode::Full => "full",
        })
    }
}

impl FromStr for CorrectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(CorrectionMode::None),
            "tau_only" => Ok(CorrectionMode::TauOnly),
            "full" => Ok(CorrectionMode::Full),
            other => Err(format!("unknown correction mode '{other}' (none | tau_only | full)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub mode: CorrectionMode,
    pub bundle: BundleOptions,
    pub ransac: RansacOptions,
    /// Observations whose residual exceeds this after the first solve are
    /// dropped and the problem is solved again.
    pub outlier_px: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            mode: CorrectionMode::None,
            bundle: BundleOptions::default(),
            ransac: RansacOptions::default(),
            outlier_px: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseCorrection {
    pub camera_id: String,
    pub delta_position_m: f64,
    pub delta_bearing_deg: f64,
}

/// Outcome of the epipolar screening of one view pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostic {
    pub view_a: ViewRef,
    pub view_b: ViewRef,
    pub matches: usize,
    pub inliers: usize,
    /// Angle between the epipolar relative rotation and the one implied by
    /// the metadata headings.
    pub rotation_disagreement_deg: Option<f64>,
    /// `"ok"` or the reason the pair was discarded.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub mode: CorrectionMode,
    pub cameras: Vec<PoseCorrection>,
    pub mean_delta_position_m: f64,
    pub mean_delta_bearing_deg: f64,
    pub pairs: Vec<PairDiagnostic>,
    pub tracks_used: usize,
    pub observations_used: usize,
    pub bundle: Option<BundleReport>,
}

impl CorrectionReport {
    fn unchanged(cameras: &[CameraPose], mode: CorrectionMode) -> Self {
        Self {
            mode,
            cameras: cameras
                .iter()
                .map(|c| PoseCorrection {
                    camera_id: c.camera_id.clone(),
                    delta_position_m: 0.0,
                    delta_bearing_deg: 0.0,
                })
                .collect(),
            mean_delta_position_m: 0.0,
            mean_delta_bearing_deg: 0.0,
            pairs: Vec::new(),
            tracks_used: 0,
            observations_used: 0,
            bundle: None,
        }
    }
}

fn view_world_rotation(heading: crate::geodesy::Bearing, view: u8) -> nalgebra::Matrix3<f64> {
    view_rotation(VIEW_YAW_STEP_DEG * f64::from(view)) * rig_rotation(heading)
}

struct ScreenedPair {
    diag: PairDiagnostic,
    cams: (usize, usize),
    inlier_matches: Vec<(PixelCoord, PixelCoord)>,
}

fn screen_pair(
    idx: usize,
    c: &Correspondence,
    cams: (usize, usize),
    poses: &[CameraPose],
    geometry: &ViewGeometry,
    ransac: &RansacOptions,
) -> ScreenedPair {
    let k = geometry.intrinsics();
    let mut diag = PairDiagnostic {
        view_a: c.view_a.clone(),
        view_b: c.view_b.clone(),
        matches: c.matches.len(),
        inliers: 0,
        rotation_disagreement_deg: None,
        status: "ok".into(),
    };
    let rejected = |mut diag: PairDiagnostic, why: String| {
        diag.status = why;
        ScreenedPair {
            diag,
            cams,
            inlier_matches: Vec::new(),
        }
    };
    if cams.0 == cams.1 {
        return rejected(diag, "same panorama".into());
    }
    let opts = RansacOptions {
        seed: ransac.seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..*ransac
    };
    let est = match estimate_essential(c, &k, &k, &opts) {
        Ok(e) => e,
        Err(e) => return rejected(diag, e.to_string()),
    };
    let inlier_matches: Vec<(PixelCoord, PixelCoord)> = c
        .pairs()
        .zip(&est.inliers)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p)
        .collect();
    diag.inliers = inlier_matches.len();
    let (xa, xb): (Vec<Vector2<f64>>, Vec<Vector2<f64>>) = inlier_matches
        .iter()
        .map(|(a, b)| (normalize_pixel(*a, &k), normalize_pixel(*b, &k)))
        .unzip();
    match decompose_essential(&est.matrix, &xa, &xb) {
        Ok(rel) => {
            let ra = view_world_rotation(poses[cams.0].heading, c.view_a.1);
            let rb = view_world_rotation(poses[cams.1].heading, c.view_b.1);
            let meta = rb * ra.transpose();
            diag.rotation_disagreement_deg = Some(rotation_angle(&rel.rotation, &meta).to_degrees());
            ScreenedPair {
                diag,
                cams,
                inlier_matches,
            }
        }
        Err(e) => rejected(diag, e.to_string()),
    }
}

fn unreachable_cameras(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    (0..n).filter(|&i| !seen[i]).collect()
}

type ObsKey = (usize, u8, i64, i64);

fn obs_key(cam: usize, view: u8, p: PixelCoord) -> ObsKey {
    (cam, view, (p.u * 1000.0).round() as i64, (p.v * 1000.0).round() as i64)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Chains pairwise inlier matches sharing an observation into tracks.
fn assemble_tracks(pairs: &[&ScreenedPair]) -> Vec<Vec<Observation>> {
    let mut ids: BTreeMap<ObsKey, usize> = BTreeMap::new();
    let mut obs: Vec<Observation> = Vec::new();
    let mut parent: Vec<usize> = Vec::new();
    let mut id_of = |cam: usize, view: u8, p: PixelCoord, obs: &mut Vec<Observation>, parent: &mut Vec<usize>| {
        *ids.entry(obs_key(cam, view, p)).or_insert_with(|| {
            obs.push(Observation {
                camera: cam,
                view_index: view,
                pixel: p,
            });
            parent.push(parent.len());
            parent.len() - 1
        })
    };
    for pair in pairs {
        for (pa, pb) in &pair.inlier_matches {
            let a = id_of(pair.cams.0, pair.diag.view_a.1, *pa, &mut obs, &mut parent);
            let b = id_of(pair.cams.1, pair.diag.view_b.1, *pb, &mut obs, &mut parent);
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<Observation>> = BTreeMap::new();
    for (i, o) in obs.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(*o);
    }
    groups
        .into_values()
        .filter(|g| {
            // one observation per (camera, view), at least two cameras
            let mut seen: Vec<(usize, u8)> = g.iter().map(|o| (o.camera, o.view_index)).collect();
            seen.sort_unstable();
            let n = seen.len();
            seen.dedup();
            let mut cams: Vec<usize> = g.iter().map(|o| o.camera).collect();
            cams.sort_unstable();
            cams.dedup();
            seen.len() == n && cams.len() >= 2
        })
        .collect()
}

fn initial_point(cams: &[BaCamera], obs: &[Observation], geometry: &ViewGeometry) -> Option<Vector3<f64>> {
    let k = geometry.intrinsics();
    let rays: Vec<(Vector3<f64>, Vector3<f64>)> = obs
        .iter()
        .map(|o| {
            let c = &cams[o.camera];
            let r = view_rotation(VIEW_YAW_STEP_DEG * f64::from(o.view_index)) * c.rotation;
            let n = normalize_pixel(o.pixel, &k);
            (c.center, r.transpose() * Vector3::new(n.x, n.y, 1.0))
        })
        .collect();
    let x = triangulate_rays(&rays)?;
    let in_front = obs.iter().all(|o| {
        let c = &cams[o.camera];
        reprojection_residual(&c.rotation, &c.center, &x, o, &k).is_some()
    });
    in_front.then_some(x)
}

/// Corrects camera poses from pixel correspondences, anchored to the GPS
/// and heading metadata.
pub fn refine_poses(
    cameras: &[CameraPose],
    frame: &LocalFrame,
    geometry: &ViewGeometry,
    correspondences: &[Correspondence],
    opts: &RefineOptions,
) -> Result<(Vec<CameraPose>, CorrectionReport), SfmError> {
    let mut poses: Vec<CameraPose> = cameras.to_vec();
    for p in poses.iter_mut() {
        p.localize(frame);
    }
    if opts.mode == CorrectionMode::None {
        return Ok((poses.clone(), CorrectionReport::unchanged(&poses, opts.mode)));
    }
    let index: HashMap<&str, usize> = poses
        .iter()
        .enumerate()
        .map(|(i, c)| (c.camera_id.as_str(), i))
        .collect();
    let mut resolved = Vec::with_capacity(correspondences.len());
    for c in correspondences {
        let lookup = |v: &ViewRef| {
            if v.1 >= VIEWS_PER_PANORAMA {
                return Err(SfmError::InvalidInput(format!("view index {} of '{}' out of range", v.1, v.0)));
            }
            index
                .get(v.0.as_str())
                .copied()
                .ok_or_else(|| SfmError::InvalidInput(format!("correspondence references unknown camera '{}'", v.0)))
        };
        resolved.push((lookup(&c.view_a)?, lookup(&c.view_b)?));
    }

    let screened: Vec<ScreenedPair> = correspondences
        .par_iter()
        .zip(resolved.par_iter())
        .enumerate()
        .map(|(i, (c, cams))| screen_pair(i, c, *cams, &poses, geometry, &opts.ransac))
        .collect();
    let accepted: Vec<&ScreenedPair> = screened.iter().filter(|p| p.diag.status == "ok").collect();
    let edges: Vec<(usize, usize)> = accepted.iter().map(|p| p.cams).collect();
    let unreachable = unreachable_cameras(poses.len(), &edges);
    if !unreachable.is_empty() {
        return Err(SfmError::DisconnectedGraph(
            unreachable.into_iter().map(|i| poses[i].camera_id.clone()).collect(),
        ));
    }

    let ba_cams: Vec<BaCamera> = poses
        .iter()
        .map(|p| {
            let c = Vector3::new(p.enu.x, p.enu.y, CAMERA_HEIGHT_M);
            BaCamera {
                rotation: rig_rotation(p.heading),
                center: c,
                prior_center: c,
                prior_heading: p.heading,
                fixed: p.fixed,
            }
        })
        .collect();
    let tracks: Vec<Track> = assemble_tracks(&accepted)
        .into_iter()
        .filter_map(|obs| {
            initial_point(&ba_cams, &obs, geometry).map(|point| Track {
                point,
                observations: obs,
            })
        })
        .collect();

    let bundle_opts = BundleOptions {
        optimize_rotation: opts.mode == CorrectionMode::Full,
        ..opts.bundle
    };
    let k = geometry.intrinsics();
    let first = bundle_adjust(&ba_cams, &tracks, &k, &bundle_opts)?;
    // drop observations the first solve could not explain, then re-solve
    let mut pruned = Vec::with_capacity(first.tracks.len());
    let mut dropped = false;
    for t in &first.tracks {
        let obs: Vec<Observation> = t
            .observations
            .iter()
            .filter(|o| {
                let c = &first.cameras[o.camera];
                reprojection_residual(&c.rotation, &c.center, &t.point, o, &k)
                    .is_some_and(|j| j.residual.norm() <= opts.outlier_px)
            })
            .copied()
            .collect();
        dropped |= obs.len() != t.observations.len();
        let mut cams: Vec<usize> = obs.iter().map(|o| o.camera).collect();
        cams.sort_unstable();
        cams.dedup();
        if cams.len() >= 2 {
            pruned.push(Track {
                point: t.point,
                observations: obs,
            });
        } else {
            dropped = true;
        }
    }
    let result = if dropped {
        bundle_adjust(&first.cameras, &pruned, &k, &bundle_opts)?
    } else {
        first
    };

    let mut refined = Vec::with_capacity(poses.len());
    let mut corrections = Vec::with_capacity(poses.len());
    for (p, c) in poses.iter().zip(&result.cameras) {
        let enu = EnuPoint::new(c.center.x, c.center.y);
        let heading = match opts.mode {
            CorrectionMode::Full => heading_of(&c.rotation),
            _ => p.heading,
        };
        let position = frame.from_enu(enu);
        let out = CameraPose {
            camera_id: p.camera_id.clone(),
            position,
            enu,
            heading,
            fixed: p.fixed,
        };
        corrections.push(PoseCorrection {
            camera_id: p.camera_id.clone(),
            delta_position_m: haversine_distance(p.position, position),
            delta_bearing_deg: heading.diff(p.heading).abs(),
        });
        refined.push(out);
    }
    let n = corrections.len().max(1) as f64;
    let report = CorrectionReport {
        mode: opts.mode,
        mean_delta_position_m: corrections.iter().map(|c| c.delta_position_m).sum::<f64>() / n,
        mean_delta_bearing_deg: corrections.iter().map(|c| c.delta_bearing_deg).sum::<f64>() / n,
        cameras: corrections,
        pairs: screened.into_iter().map(|p| p.diag).collect(),
        tracks_used: result.tracks.len(),
        observations_used: result.tracks.iter().map(|t| t.observations.len()).sum(),
        bundle: Some(result.report),
    };
    Ok((refined, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!("tau_only".parse::<CorrectionMode>().unwrap(), CorrectionMode::TauOnly);
        assert_eq!(CorrectionMode::Full.to_string(), "full");
        assert!("both".parse::<CorrectionMode>().is_err());
    }

    #[test]
    fn reachability() {
        assert_eq!(unreachable_cameras(4, &[(0, 1), (1, 2)]), vec![3]);
        assert!(unreachable_cameras(3, &[(2, 1), (0, 2)]).is_empty());
    }
}
