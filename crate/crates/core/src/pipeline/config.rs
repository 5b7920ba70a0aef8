//! The run configuration: one TOML file, every tunable under a named key.

use super::PipelineError;
use crate::eval::DEFAULT_TP_RADIUS_M;
use crate::mrf::EnergyParams;
use crate::osmprior::PriorParams;
use crate::panorama::{ViewGeometry, VIEWS_PER_PANORAMA, VIEW_HFOV_DEG, VIEW_YAW_STEP_DEG};
use crate::sfm::{BundleOptions, CorrectionMode, RansacOptions, RefineOptions};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// CSV with `camera_id,lat,lon,heading_deg`.
    pub cameras: PathBuf,
    /// Line-delimited detections.
    pub detections: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondences: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub osm: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewsConfig {
    pub per_panorama: u8,
    pub hfov_deg: f64,
    pub yaw_step_deg: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        let g = ViewGeometry::default();
        Self {
            per_panorama: VIEWS_PER_PANORAMA,
            hfov_deg: VIEW_HFOV_DEG,
            yaw_step_deg: VIEW_YAW_STEP_DEG,
            width_px: g.width,
            height_px: g.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmConfig {
    pub mode: CorrectionMode,
    pub gps_weight: f64,
    pub heading_weight: f64,
    pub tilt_weight: f64,
    pub robust_delta_px: f64,
    pub max_iterations: usize,
    pub outlier_px: f64,
    pub ransac_iterations: usize,
    pub ransac_threshold_px: f64,
    pub min_parallax_deg: f64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        let r = RefineOptions::default();
        Self {
            mode: r.mode,
            gps_weight: r.bundle.gps_weight,
            heading_weight: r.bundle.heading_weight,
            tilt_weight: r.bundle.tilt_weight,
            robust_delta_px: r.bundle.robust_delta,
            max_iterations: r.bundle.max_iters,
            outlier_px: r.outlier_px,
            ransac_iterations: r.ransac.iterations,
            ransac_threshold_px: r.ransac.threshold_px,
            min_parallax_deg: r.ransac.min_parallax_deg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrfConfig {
    pub depth_sigma_m: f64,
    pub pairwise_penalty: f64,
    pub occupancy_bias: f64,
    pub min_angle_deg: f64,
    pub max_depth_m: f64,
    pub restarts: usize,
}

impl Default for MrfConfig {
    fn default() -> Self {
        let e = EnergyParams::default();
        Self {
            depth_sigma_m: e.depth_sigma,
            pairwise_penalty: e.pairwise_penalty,
            occupancy_bias: e.occupancy_bias,
            min_angle_deg: e.min_angle,
            max_depth_m: e.max_depth,
            restarts: e.restarts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub threshold_m: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { threshold_m: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub sigma_road_m: f64,
    pub sigma_building_m: f64,
    pub interpolation_m: f64,
    pub grid_resolution_m: f64,
    pub truncation_sigmas: f64,
    /// Also write the weight field as an ASCII grid.
    pub export_heatmap: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let p = PriorParams::default();
        Self {
            sigma_road_m: p.sigma_road,
            sigma_building_m: p.sigma_building,
            interpolation_m: p.spacing,
            grid_resolution_m: p.cell_size,
            truncation_sigmas: p.truncation,
            export_heatmap: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tp_radius_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tp_radius_m: DEFAULT_TP_RADIUS_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub views: ViewsConfig,
    #[serde(default)]
    pub sfm: SfmConfig,
    #[serde(default)]
    pub mrf: MrfConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Parses a config; relative paths are taken from `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.cameras);
        fix(&mut paths.detections);
        fix(&mut paths.output_dir);
        for p in [&mut paths.correspondences, &mut paths.osm, &mut paths.truth, &mut paths.stage_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let v = &self.views;
        if v.per_panorama != VIEWS_PER_PANORAMA || v.yaw_step_deg != VIEW_YAW_STEP_DEG {
            return bad(format!(
                "views.per_panorama = {} and views.yaw_step_deg = {} are unsupported; only {} views {} deg apart",
                v.per_panorama, v.yaw_step_deg, VIEWS_PER_PANORAMA, VIEW_YAW_STEP_DEG
            ));
        }
        if !(v.hfov_deg > 0.0 && v.hfov_deg < 180.0) || v.width_px == 0 || v.height_px == 0 {
            return bad("views.hfov_deg must be in (0, 180) and view sizes positive".into());
        }
        let positive = [
            ("sfm.gps_weight", self.sfm.gps_weight),
            ("sfm.robust_delta_px", self.sfm.robust_delta_px),
            ("sfm.outlier_px", self.sfm.outlier_px),
            ("sfm.ransac_threshold_px", self.sfm.ransac_threshold_px),
            ("mrf.depth_sigma_m", self.mrf.depth_sigma_m),
            ("mrf.max_depth_m", self.mrf.max_depth_m),
            ("cluster.threshold_m", self.cluster.threshold_m),
            ("prior.sigma_road_m", self.prior.sigma_road_m),
            ("prior.sigma_building_m", self.prior.sigma_building_m),
            ("prior.interpolation_m", self.prior.interpolation_m),
            ("prior.grid_resolution_m", self.prior.grid_resolution_m),
            ("prior.truncation_sigmas", self.prior.truncation_sigmas),
            ("eval.tp_radius_m", self.eval.tp_radius_m),
        ];
        if let Some((k, x)) = positive.iter().find(|(_, x)| !(x.is_finite() && *x > 0.0)) {
            return bad(format!("{k} must be positive, got {x}"));
        }
        let non_negative = [
            ("sfm.heading_weight", self.sfm.heading_weight),
            ("sfm.tilt_weight", self.sfm.tilt_weight),
            ("mrf.pairwise_penalty", self.mrf.pairwise_penalty),
            ("mrf.occupancy_bias", self.mrf.occupancy_bias),
            ("mrf.min_angle_deg", self.mrf.min_angle_deg),
        ];
        if let Some((k, x)) = non_negative.iter().find(|(_, x)| !(x.is_finite() && *x >= 0.0)) {
            return bad(format!("{k} must be non-negative, got {x}"));
        }
        if self.mrf.min_angle_deg >= 90.0 {
            return bad("mrf.min_angle_deg must be below 90".into());
        }
        Ok(())
    }

    /// Fails when a referenced input file is missing.
    pub fn check_inputs(&self) -> Result<(), PipelineError> {
        let p = &self.paths;
        let required = [Some(&p.cameras), Some(&p.detections), p.correspondences.as_ref(), p.osm.as_ref(), p.truth.as_ref()];
        for path in required.into_iter().flatten() {
            if !path.is_file() {
                return Err(PipelineError::Config(format!("input {} does not exist", path.display())));
            }
        }
        if self.sfm.mode != CorrectionMode::None && p.correspondences.is_none() {
            return Err(PipelineError::Config(format!(
                "sfm.mode = {} needs paths.correspondences",
                self.sfm.mode
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> ViewGeometry {
        ViewGeometry {
            width: self.views.width_px,
            height: self.views.height_px,
            hfov: self.views.hfov_deg,
        }
    }

    pub fn refine_options(&self) -> RefineOptions {
        let s = &self.sfm;
        RefineOptions {
            mode: s.mode,
            bundle: BundleOptions {
                gps_weight: s.gps_weight,
                heading_weight: s.heading_weight,
                tilt_weight: s.tilt_weight,
                robust_delta: s.robust_delta_px,
                max_iters: s.max_iterations,
                ..BundleOptions::default()
            },
            ransac: RansacOptions {
                iterations: s.ransac_iterations,
                threshold_px: s.ransac_threshold_px,
                seed: self.seed,
                min_parallax_deg: s.min_parallax_deg,
            },
            outlier_px: s.outlier_px,
        }
    }

    pub fn energy_params(&self) -> EnergyParams {
        let m = &self.mrf;
        EnergyParams {
            depth_sigma: m.depth_sigma_m,
            pairwise_penalty: m.pairwise_penalty,
            occupancy_bias: m.occupancy_bias,
            min_angle: m.min_angle_deg,
            max_depth: m.max_depth_m,
            seed: self.seed,
            restarts: m.restarts,
        }
    }

    pub fn prior_params(&self) -> PriorParams {
        let p = &self.prior;
        PriorParams {
            sigma_road: p.sigma_road_m,
            sigma_building: p.sigma_building_m,
            spacing: p.interpolation_m,
            cell_size: p.grid_resolution_m,
            truncation: p.truncation_sigmas,
        }
    }

    /// Where stage artifacts go: the configured stage dir, or `stages/`
    /// under the output dir.
    pub fn stage_dir(&self) -> PathBuf {
        self.paths
            .stage_dir
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("stages"))
    }
}
