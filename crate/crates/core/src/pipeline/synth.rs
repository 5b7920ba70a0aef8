//! Synthetic street scenes with known answers: cameras along a straight
//! street, objects on the verges, textured facades for feature matches and
//! a matching map extract.

use super::io::{self, CameraRecord};
use super::{PathsConfig, PipelineConfig, PipelineError};
use crate::eval::Site;
use crate::geodesy::{Bearing, EnuPoint, GeoPoint, LocalFrame};
use crate::mrf::{Detection, DetectionGeometry};
use crate::panorama::{bearing_to_view_pixel, PixelCoord, ViewGeometry, VIEWS_PER_PANORAMA};
use crate::sfm::{view_rotation, CalibratedCamera, CameraPose, Correspondence, CorrectionMode, PoseTransform, ViewRef};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CAMERAS_FILE: &str = "cameras.csv";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const CORRESPONDENCES_FILE: &str = "correspondences.jsonl";
pub const OSM_FILE: &str = "map.osm";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Smallest ground distance between two generated objects.
pub const MIN_OBJECT_SEPARATION_M: f64 = 8.0;
/// Matches needed before a view pair is written as a correspondence.
pub const MIN_SHARED_LANDMARKS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_cameras: usize,
    pub n_objects: usize,
    /// Distance between consecutive cameras along the street.
    pub camera_spacing_m: f64,
    /// Lateral distance of objects from the street centerline.
    pub object_offset_m: f64,
    /// Lateral distance of the building fronts.
    pub facade_offset_m: f64,
    pub n_landmarks: usize,
    /// Cameras farther than this from an object do not detect it.
    pub detection_range_m: f64,
    pub gps_sigma_m: f64,
    pub heading_sigma_deg: f64,
    pub depth_sigma_m: f64,
    pub pixel_sigma: f64,
    /// Fraction of feature matches replaced by random pixels.
    pub outlier_rate: f64,
    pub seed: u64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub street_bearing_deg: f64,
    pub mode: CorrectionMode,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_cameras: 5,
            n_objects: 3,
            camera_spacing_m: 8.0,
            object_offset_m: 6.0,
            facade_offset_m: 10.0,
            n_landmarks: 240,
            detection_range_m: 20.0,
            gps_sigma_m: 0.0,
            heading_sigma_deg: 0.0,
            depth_sigma_m: 0.0,
            pixel_sigma: 0.0,
            outlier_rate: 0.0,
            seed: 0,
            origin_lat: 53.3498,
            origin_lon: -6.2603,
            street_bearing_deg: 70.0,
            mode: CorrectionMode::Full,
        }
    }
}

/// A generated scene, in memory.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub params: SynthParams,
    /// The frame the scene was laid out in.
    pub frame: LocalFrame,
    pub true_poses: Vec<CameraPose>,
    /// Metadata as a GPS receiver and compass would report it.
    pub cameras: Vec<CameraRecord>,
    pub objects: Vec<EnuPoint>,
    pub truth: Vec<Site>,
    pub detections: Vec<Detection>,
    pub correspondences: Vec<Correspondence>,
    pub landmarks: Vec<Vector3<f64>>,
    pub osm_xml: String,
}

fn camera_id(i: usize) -> String {
    format!("cam-{i:03}")
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

pub fn generate(params: &SynthParams) -> SynthScene {
    let p = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let frame = LocalFrame::new(GeoPoint::new(p.origin_lat, p.origin_lon).expect("valid origin"));
    let street = Bearing::new(p.street_bearing_deg);
    let (ue, un) = street.to_direction();
    // left of the direction of travel
    let (le, ln) = (-un, ue);
    let at = |s: f64, l: f64| EnuPoint::new(s * ue + l * le, s * un + l * ln);

    let half_span = (p.n_cameras.max(1) - 1) as f64 * p.camera_spacing_m / 2.0;
    let true_poses: Vec<CameraPose> = (0..p.n_cameras)
        .map(|i| {
            let s = i as f64 * p.camera_spacing_m - half_span;
            let heading = Bearing::new(p.street_bearing_deg + rng.gen_range(-15.0..15.0));
            let position = frame.from_enu(at(s, 0.0));
            CameraPose::new(&camera_id(i), position, heading, &frame)
        })
        .collect();

    let mut objects: Vec<EnuPoint> = Vec::new();
    let mut attempts = 0;
    while objects.len() < p.n_objects && attempts < 10_000 {
        attempts += 1;
        let s = rng.gen_range(-half_span - 2.0..=half_span + 2.0);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let o = at(s, side * p.object_offset_m);
        if objects.iter().all(|q| q.distance(&o) >= MIN_OBJECT_SEPARATION_M) {
            objects.push(o);
        }
    }
    let truth = objects
        .iter()
        .enumerate()
        .map(|(i, o)| Site::new(format!("truth-{i:03}"), frame.from_enu(*o)))
        .collect();

    let geometry = ViewGeometry::default();
    let views: Vec<_> = (0..VIEWS_PER_PANORAMA)
        .map(|k| geometry.view("", k).expect("view index in range"))
        .collect();
    let depth_noise = normal(p.depth_sigma_m);
    let mut detections = Vec::new();
    for cam in &true_poses {
        for o in &objects {
            let d = cam.enu.distance(o);
            if d > p.detection_range_m || d < 1.0 {
                continue;
            }
            let b = Bearing::from_direction(o.x - cam.enu.x, o.y - cam.enu.y);
            let Some(&(view_index, px)) = bearing_to_view_pixel(&views, cam.heading, b).first() else {
                continue;
            };
            let depth = (d + depth_noise.sample(&mut rng)).max(0.5);
            detections.push(Detection {
                camera_id: cam.camera_id.clone(),
                geometry: DetectionGeometry::Pixel {
                    view_index,
                    pixel: [px.u, px.v],
                },
                depth_m: depth,
                class: Some("object".into()),
            });
        }
    }

    let reach = half_span + p.detection_range_m;
    let landmarks: Vec<Vector3<f64>> = (0..p.n_landmarks)
        .map(|i| {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            let g = at(rng.gen_range(-reach..reach), side * (p.facade_offset_m + rng.gen_range(0.0..0.5)));
            Vector3::new(g.x, g.y, rng.gen_range(0.5..9.0))
        })
        .collect();
    let correspondences = correspondences(&p, &true_poses, &landmarks, &geometry, &mut rng);

    let gps = normal(p.gps_sigma_m);
    let compass = normal(p.heading_sigma_deg);
    let cameras = true_poses
        .iter()
        .map(|c| {
            let noisy = EnuPoint::new(c.enu.x + gps.sample(&mut rng), c.enu.y + gps.sample(&mut rng));
            let g = frame.from_enu(noisy);
            CameraRecord {
                camera_id: c.camera_id.clone(),
                lat: g.lat,
                lon: g.lon,
                heading_deg: Bearing::new(c.heading.degrees() + compass.sample(&mut rng)).degrees(),
            }
        })
        .collect();

    let osm_xml = osm_extract(&frame, &at, reach + 10.0, p.facade_offset_m);
    SynthScene {
        params: p,
        frame,
        true_poses,
        cameras,
        objects,
        truth,
        detections,
        correspondences,
        landmarks,
        osm_xml,
    }
}

fn correspondences(
    p: &SynthParams,
    poses: &[CameraPose],
    landmarks: &[Vector3<f64>],
    geometry: &ViewGeometry,
    rng: &mut ChaCha8Rng,
) -> Vec<Correspondence> {
    let k = geometry.intrinsics();
    let noise = normal(p.pixel_sigma);
    let (w, h) = (f64::from(geometry.width), f64::from(geometry.height));
    // noisy pixel of every landmark in every view that sees it, drawn once
    let mut seen: Vec<Vec<HashMap<usize, PixelCoord>>> = Vec::with_capacity(poses.len());
    for cam in poses {
        let rig = cam.transform();
        let mut per_view = Vec::with_capacity(usize::from(VIEWS_PER_PANORAMA));
        for v in 0..VIEWS_PER_PANORAMA {
            let r = view_rotation(f64::from(v) * 45.0) * rig.rotation;
            let camera = CalibratedCamera::new(PoseTransform::from_center(r, cam.center()), k);
            let mut pix = HashMap::new();
            for (j, x) in landmarks.iter().enumerate() {
                if let Some(q) = camera.project(x) {
                    let q = PixelCoord::new(q.u + noise.sample(rng), q.v + noise.sample(rng));
                    if q.u >= 0.0 && q.u < w && q.v >= 0.0 && q.v < h {
                        pix.insert(j, q);
                    }
                }
            }
            per_view.push(pix);
        }
        seen.push(per_view);
    }
    let mut out = Vec::new();
    for a in 0..poses.len() {
        for b in a + 1..poses.len().min(a + 3) {
            for va in 0..VIEWS_PER_PANORAMA {
                for vb in 0..VIEWS_PER_PANORAMA {
                    let (pa, pb) = (&seen[a][usize::from(va)], &seen[b][usize::from(vb)]);
                    let mut shared: Vec<usize> = pa.keys().filter(|j| pb.contains_key(j)).copied().collect();
                    if shared.len() < MIN_SHARED_LANDMARKS {
                        continue;
                    }
                    shared.sort_unstable();
                    let matches = shared
                        .iter()
                        .map(|j| {
                            let (qa, mut qb) = (pa[j], pb[j]);
                            if rng.gen_bool(p.outlier_rate.clamp(0.0, 1.0)) {
                                qb = PixelCoord::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h));
                            }
                            [qa.u, qa.v, qb.u, qb.v]
                        })
                        .collect();
                    out.push(Correspondence {
                        view_a: ViewRef(poses[a].camera_id.clone(), va),
                        view_b: ViewRef(poses[b].camera_id.clone(), vb),
                        matches,
                    });
                }
            }
        }
    }
    out
}

/// A road along the street axis and one building block on each side.
fn osm_extract(frame: &LocalFrame, at: &dyn Fn(f64, f64) -> EnuPoint, half_len: f64, facade: f64) -> String {
    let mut nodes = Vec::new();
    let mut ways = Vec::new();
    let mut node = |e: EnuPoint| {
        nodes.push(frame.from_enu(e));
        nodes.len()
    };
    let road = [node(at(-half_len, 0.0)), node(at(half_len, 0.0))];
    ways.push((road.to_vec(), "highway", "residential"));
    for side in [1.0, -1.0] {
        let c = [
            node(at(-half_len, side * facade)),
            node(at(half_len, side * facade)),
            node(at(half_len, side * (facade + 12.0))),
            node(at(-half_len, side * (facade + 12.0))),
        ];
        ways.push((vec![c[0], c[1], c[2], c[3], c[0]], "building", "yes"));
    }
    let mut xml = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\">\n");
    for (i, g) in nodes.iter().enumerate() {
        let _ = writeln!(xml, "  <node id=\"{}\" lat=\"{:.9}\" lon=\"{:.9}\"/>", i + 1, g.lat, g.lon);
    }
    for (i, (refs, k, v)) in ways.iter().enumerate() {
        let _ = writeln!(xml, "  <way id=\"{}\">", 1000 + i);
        for r in refs {
            let _ = writeln!(xml, "    <nd ref=\"{r}\"/>");
        }
        let _ = writeln!(xml, "    <tag k=\"{k}\" v=\"{v}\"/>\n  </way>");
    }
    xml.push_str("</osm>\n");
    xml
}

impl SynthScene {
    /// Run configuration over the scene's files in `dir`.
    pub fn config(&self, dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            seed: self.params.seed,
            paths: PathsConfig {
                cameras: dir.join(CAMERAS_FILE),
                detections: dir.join(DETECTIONS_FILE),
                correspondences: Some(dir.join(CORRESPONDENCES_FILE)),
                osm: Some(dir.join(OSM_FILE)),
                truth: Some(dir.join(TRUTH_FILE)),
                output_dir: dir.join("out"),
                stage_dir: None,
            },
            views: Default::default(),
            sfm: Default::default(),
            mrf: Default::default(),
            cluster: Default::default(),
            prior: Default::default(),
            eval: Default::default(),
        };
        cfg.sfm.mode = self.params.mode;
        cfg
    }

    /// Writes the inputs and a `config.toml` with relative paths; returns
    /// the config path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        io::write_cameras(&dir.join(CAMERAS_FILE), &self.cameras)?;
        io::write_jsonl(&dir.join(DETECTIONS_FILE), &self.detections)?;
        io::write_jsonl(&dir.join(CORRESPONDENCES_FILE), &self.correspondences)?;
        io::write_jsonl(&dir.join(TRUTH_FILE), &self.truth)?;
        io::write_text(&dir.join(OSM_FILE), &self.osm_xml)?;
        let path = dir.join(CONFIG_FILE);
        io::write_text(&path, &self.config(Path::new("")).to_toml())?;
        Ok(path)
    }
}
