//! Batch driver: loads the inputs named in a [`PipelineConfig`], runs the
//! stages in order and writes per-stage artifacts, the predictions
//! GeoJSON and a run manifest.
//!
//! Every stage also exists as a standalone step that reads the previous
//! stage's artifact from the stage directory, so a run can be replayed and
//! inspected one stage at a time.

mod config;
pub mod io;
pub mod synth;

pub use config::{
    ClusterConfig, EvalConfig, MrfConfig, PathsConfig, PipelineConfig, PriorConfig, SfmConfig, ViewsConfig,
};

use crate::eval::{evaluate, EvalReport, Site};
use crate::geodesy::{GeoPoint, LocalFrame};
use crate::mrf::{
    build_intersection_graph, cast_rays, energy, solve_mrf, Detection, EnergyParams, IntersectionNode, Labeling,
    ObservationRay, RayGraph,
};
use crate::osmprior::{build_prior_field, parse_osm_xml, Heatmap, PriorField};
use crate::panorama::{RectilinearView, ViewGeometry, VIEWS_PER_PANORAMA};
use crate::refine::{cluster_positives, Cluster};
use crate::sfm::{refine_poses, CameraPose, Correspondence, CorrectionMode, CorrectionReport, RefineOptions};
use io::OutputGuard;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Schema { path: PathBuf, line: usize, message: String },
    #[error("stage {stage} failed on {input}: {message}")]
    Stage {
        stage: &'static str,
        input: String,
        message: String,
    },
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn stage(stage: &'static str, input: &Path, err: impl std::fmt::Display) -> Self {
        Self::Stage {
            stage,
            input: input.display().to_string(),
            message: err.to_string(),
        }
    }
}

/// Artifact file names inside the stage directory.
pub mod artifacts {
    pub const VIEWS: &str = "views.jsonl";
    pub const POSES: &str = "poses.jsonl";
    pub const CORRECTION: &str = "correction.json";
    pub const RAYS: &str = "rays.jsonl";
    pub const NODES: &str = "nodes.jsonl";
    pub const LABELS: &str = "labels.jsonl";
    pub const CLUSTERS: &str = "clusters.jsonl";
    pub const REFINED: &str = "refined.jsonl";
    pub const PREDICTIONS: &str = "predictions.geojson";
    pub const MANIFEST: &str = "manifest.json";
    pub const EVALUATION: &str = "evaluation.json";
    pub const HEATMAP: &str = "prior_heatmap.asc";
}

/// One line of the labeling artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub node_id: usize,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub mode: CorrectionMode,
    pub mean_delta_position_m: f64,
    pub mean_delta_bearing_deg: f64,
    pub pairs_total: usize,
    pub pairs_accepted: usize,
    pub tracks_used: usize,
}

impl From<&CorrectionReport> for CorrectionSummary {
    fn from(r: &CorrectionReport) -> Self {
        Self {
            mode: r.mode,
            mean_delta_position_m: r.mean_delta_position_m,
            mean_delta_bearing_deg: r.mean_delta_bearing_deg,
            pairs_total: r.pairs.len(),
            pairs_accepted: r.pairs.iter().filter(|p| p.status == "ok").count(),
            tracks_used: r.tracks_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub rays: usize,
    pub nodes: usize,
    pub positives: usize,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementSummary {
    pub clusters: usize,
    pub kernels: usize,
    /// Mean distance between the prior-weighted and plain cluster positions.
    pub mean_prior_displacement_m: f64,
    pub prior_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    /// Scores of the plain cluster means.
    pub pre_prior: EvalReport,
    /// Scores of the prior-weighted positions.
    pub post_prior: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: PipelineConfig,
    pub frame_origin: GeoPoint,
    pub timings: Vec<StageTiming>,
    pub correction: CorrectionSummary,
    pub graph: GraphSummary,
    pub refinement: RefinementSummary,
    pub evaluation: Option<EvaluationSummary>,
    pub outputs: Vec<PathBuf>,
}

/// Everything a full run produces in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub frame: LocalFrame,
    pub poses: Vec<CameraPose>,
    pub graph: RayGraph,
    pub labeling: Labeling,
    pub clusters: Vec<Cluster>,
    pub refined: Vec<Cluster>,
}

// ---- pure stage functions ----

pub fn views_for(cameras: &[CameraPose], geometry: &ViewGeometry) -> Vec<RectilinearView> {
    cameras
        .iter()
        .flat_map(|c| (0..VIEWS_PER_PANORAMA).map(move |k| RectilinearView::new(&c.camera_id, k, geometry.width, geometry.height, geometry.hfov)))
        .collect()
}

pub fn graph_for(
    detections: &[Detection],
    poses: &[CameraPose],
    geometry: &ViewGeometry,
    params: &EnergyParams,
) -> Result<RayGraph, crate::mrf::MrfError> {
    let rays = cast_rays(detections, poses, geometry)?;
    Ok(build_intersection_graph(&rays, params))
}

/// Clusters the positive nodes; member indices are node ids.
pub fn clusters_for(graph: &RayGraph, labeling: &Labeling, threshold: f64) -> Vec<Cluster> {
    let ids: Vec<usize> = labeling.positives().collect();
    let sites: Vec<_> = ids.iter().map(|&i| graph.nodes[i].position).collect();
    let mut clusters = cluster_positives(&sites, threshold);
    for c in &mut clusters {
        for m in &mut c.members {
            *m = ids[*m];
        }
    }
    clusters
}

pub fn refined_for(clusters: &[Cluster], prior: &PriorField) -> Vec<Cluster> {
    clusters
        .iter()
        .map(|c| {
            let mut r = c.clone();
            r.apply_prior(prior);
            r
        })
        .collect()
}

fn prior_for(cfg: &PipelineConfig, frame: &LocalFrame) -> Result<PriorField, PipelineError> {
    match &cfg.paths.osm {
        None => Ok(PriorField::empty()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
            let osm = parse_osm_xml(&text).map_err(|e| PipelineError::stage("apply-prior", path, e))?;
            Ok(build_prior_field(&osm, frame, &cfg.prior_params()))
        }
    }
}

fn mean_displacement(before: &[Cluster], after: &[Cluster]) -> f64 {
    if before.is_empty() {
        return 0.0;
    }
    before
        .iter()
        .zip(after)
        .map(|(a, b)| a.position.distance(&b.position))
        .sum::<f64>()
        / before.len() as f64
}

fn refine_stage(
    cfg: &PipelineConfig,
    cameras: &[CameraPose],
    frame: &LocalFrame,
) -> Result<(Vec<CameraPose>, CorrectionReport), PipelineError> {
    let opts: RefineOptions = cfg.refine_options();
    let correspondences: Vec<Correspondence> = match (&cfg.paths.correspondences, opts.mode) {
        (_, CorrectionMode::None) | (None, _) => Vec::new(),
        (Some(p), _) => io::read_jsonl(p)?,
    };
    let input = cfg.paths.correspondences.as_deref().unwrap_or(&cfg.paths.cameras);
    let (mut poses, report) = refine_poses(cameras, frame, &cfg.geometry(), &correspondences, &opts)
        .map_err(|e| PipelineError::stage("refine-poses", input, e))?;
    // geographic positions are the record; later stages see them re-projected
    for p in &mut poses {
        p.localize(frame);
    }
    Ok((poses, report))
}

// ---- standalone steps over the stage directory ----

fn stage_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.stage_dir().join(name)
}

fn load_poses(cfg: &PipelineConfig) -> Result<(Vec<CameraPose>, LocalFrame), PipelineError> {
    let (_, frame) = io::read_cameras(&cfg.paths.cameras)?;
    let mut poses: Vec<CameraPose> = io::read_jsonl(&stage_path(cfg, artifacts::POSES))?;
    for p in &mut poses {
        p.localize(&frame);
    }
    Ok((poses, frame))
}

fn load_graph(cfg: &PipelineConfig) -> Result<RayGraph, PipelineError> {
    let rays: Vec<ObservationRay> = io::read_jsonl(&stage_path(cfg, artifacts::RAYS))?;
    let nodes: Vec<IntersectionNode> = io::read_jsonl(&stage_path(cfg, artifacts::NODES))?;
    let path = stage_path(cfg, artifacts::NODES);
    for (i, n) in nodes.iter().enumerate() {
        if n.node_id != i || n.ray_ids.iter().any(|&r| r >= rays.len()) {
            return Err(PipelineError::Schema {
                path,
                line: i + 1,
                message: format!("node {} does not fit {} rays", n.node_id, rays.len()),
            });
        }
    }
    Ok(RayGraph::from_parts(rays, nodes))
}

fn load_labeling(cfg: &PipelineConfig, n: usize) -> Result<Labeling, PipelineError> {
    let path = stage_path(cfg, artifacts::LABELS);
    let recs: Vec<LabelRecord> = io::read_jsonl(&path)?;
    if recs.len() != n {
        return Err(PipelineError::Schema {
            path,
            line: recs.len(),
            message: format!("{} labels for {n} nodes", recs.len()),
        });
    }
    let mut labels = vec![false; n];
    for (i, r) in recs.iter().enumerate() {
        if r.node_id != i || r.label > 1 {
            return Err(PipelineError::Schema {
                path,
                line: i + 1,
                message: format!("expected node {i} with label 0 or 1"),
            });
        }
        labels[i] = r.label == 1;
    }
    Ok(Labeling { labels })
}

fn label_records(l: &Labeling) -> Vec<LabelRecord> {
    l.labels
        .iter()
        .enumerate()
        .map(|(node_id, &z)| LabelRecord { node_id, label: u8::from(z) })
        .collect()
}

/// Writes `views.jsonl`: the rectilinear views of every panorama.
pub fn step_split_views(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let (cams, _) = io::read_cameras(&cfg.paths.cameras)?;
    let out = stage_path(cfg, artifacts::VIEWS);
    io::write_jsonl(&out, &views_for(&cams, &cfg.geometry()))?;
    Ok(out)
}

/// Writes `poses.jsonl` and `correction.json`.
pub fn step_refine_poses(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let (cams, frame) = io::read_cameras(&cfg.paths.cameras)?;
    let (poses, report) = refine_stage(cfg, &cams, &frame)?;
    let out = stage_path(cfg, artifacts::POSES);
    io::write_jsonl(&out, &poses)?;
    io::write_json(&stage_path(cfg, artifacts::CORRECTION), &report)?;
    Ok(out)
}

/// Reads `poses.jsonl`, writes `rays.jsonl` and `nodes.jsonl`.
pub fn step_build_graph(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let (poses, _) = load_poses(cfg)?;
    let dets: Vec<Detection> = io::read_jsonl(&cfg.paths.detections)?;
    let graph = graph_for(&dets, &poses, &cfg.geometry(), &cfg.energy_params())
        .map_err(|e| PipelineError::stage("build-graph", &cfg.paths.detections, e))?;
    io::write_jsonl(&stage_path(cfg, artifacts::RAYS), &graph.rays)?;
    let out = stage_path(cfg, artifacts::NODES);
    io::write_jsonl(&out, &graph.nodes)?;
    Ok(out)
}

/// Reads the graph, writes `labels.jsonl`.
pub fn step_solve_mrf(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let graph = load_graph(cfg)?;
    let labeling = solve_mrf(&graph, &cfg.energy_params());
    let out = stage_path(cfg, artifacts::LABELS);
    io::write_jsonl(&out, &label_records(&labeling))?;
    Ok(out)
}

/// Reads graph and labels, writes `clusters.jsonl`.
pub fn step_cluster(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let graph = load_graph(cfg)?;
    let labeling = load_labeling(cfg, graph.node_count())?;
    let out = stage_path(cfg, artifacts::CLUSTERS);
    io::write_jsonl(&out, &clusters_for(&graph, &labeling, cfg.cluster.threshold_m))?;
    Ok(out)
}

/// Reads `clusters.jsonl` and the map, writes `refined.jsonl` and the
/// predictions GeoJSON.
pub fn step_apply_prior(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let (_, frame) = io::read_cameras(&cfg.paths.cameras)?;
    let clusters: Vec<Cluster> = io::read_jsonl(&stage_path(cfg, artifacts::CLUSTERS))?;
    let prior = prior_for(cfg, &frame)?;
    let refined = refined_for(&clusters, &prior);
    io::write_jsonl(&stage_path(cfg, artifacts::REFINED), &refined)?;
    if cfg.prior.export_heatmap {
        write_heatmap(&prior, &cfg.paths.output_dir.join(artifacts::HEATMAP))?;
    }
    let out = cfg.paths.output_dir.join(artifacts::PREDICTIONS);
    io::write_json(&out, &io::predictions_geojson(&refined, &frame))?;
    Ok(out)
}

/// Scores `predictions` (default: the run's GeoJSON) against the truth file.
pub fn step_evaluate(cfg: &PipelineConfig, predictions: Option<&Path>) -> Result<EvalReport, PipelineError> {
    let truth_path = cfg
        .paths
        .truth
        .as_ref()
        .ok_or_else(|| PipelineError::Config("evaluation needs paths.truth".into()))?;
    let default = cfg.paths.output_dir.join(artifacts::PREDICTIONS);
    let preds = io::read_predictions_geojson(predictions.unwrap_or(&default))?;
    let truths: Vec<Site> = io::read_jsonl(truth_path)?;
    let (m, report) = evaluate(&preds, &truths, cfg.eval.tp_radius_m);
    io::write_json(
        &cfg.paths.output_dir.join(artifacts::EVALUATION),
        &serde_json::json!({ "report": report, "matches": m }),
    )?;
    Ok(report)
}

/// A stored score-table row: object counts without positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub n_actual: usize,
    pub n_detected: usize,
    pub tp: usize,
}

/// Scores every row of a counts file.
pub fn evaluate_counts(path: &Path) -> Result<Vec<(CountsRecord, EvalReport)>, PipelineError> {
    let rows: Vec<CountsRecord> = io::read_jsonl(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.tp > r.n_actual.min(r.n_detected) {
                return Err(PipelineError::Schema {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("tp {} exceeds n_actual {} or n_detected {}", r.tp, r.n_actual, r.n_detected),
                });
            }
            let report = EvalReport::from_counts(r.n_actual, r.n_detected, r.tp, None);
            Ok((r, report))
        })
        .collect()
}

fn write_heatmap(prior: &PriorField, path: &Path) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    if let Some(h) = Heatmap::around_kernels(prior) {
        h.write_ascii(&mut buf).map_err(|e| PipelineError::io(path, e))?;
    }
    io::write_text(path, &String::from_utf8_lossy(&buf))
}

// ---- full run ----

struct Clock {
    timings: Vec<StageTiming>,
    last: Instant,
}

impl Clock {
    fn new() -> Self {
        Self {
            timings: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: (now - self.last).as_secs_f64(),
        });
        self.last = now;
    }
}

/// Runs every stage, writing stage artifacts, predictions and the manifest.
/// On failure, files written so far are removed.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    cfg.check_inputs()?;
    let mut guard = OutputGuard::default();
    let mut clock = Clock::new();
    let geometry = cfg.geometry();
    let params = cfg.energy_params();

    let (cams, frame) = io::read_cameras(&cfg.paths.cameras)?;
    let detections: Vec<Detection> = io::read_jsonl(&cfg.paths.detections)?;
    clock.lap("load");

    io::write_jsonl(&guard.track(stage_path(cfg, artifacts::VIEWS)), &views_for(&cams, &geometry))?;
    clock.lap("split-views");

    let (poses, correction) = refine_stage(cfg, &cams, &frame)?;
    io::write_jsonl(&guard.track(stage_path(cfg, artifacts::POSES)), &poses)?;
    io::write_json(&guard.track(stage_path(cfg, artifacts::CORRECTION)), &correction)?;
    clock.lap("refine-poses");

    let graph = graph_for(&detections, &poses, &geometry, &params)
        .map_err(|e| PipelineError::stage("build-graph", &cfg.paths.detections, e))?;
    io::write_jsonl(&guard.track(stage_path(cfg, artifacts::RAYS)), &graph.rays)?;
    io::write_jsonl(&guard.track(stage_path(cfg, artifacts::NODES)), &graph.nodes)?;
    clock.lap("build-graph");

    let labeling = solve_mrf(&graph, &params);
    let graph_energy = energy(&graph, &labeling, &params).expect("labeling sized to graph");
    io::write_jsonl(&guard.track(stage_path(cfg, artifacts::LABELS)), &label_records(&labeling))?;
    clock.lap("solve-mrf");

    let clusters = clusters_for(&graph, &labeling, cfg.cluster.threshold_m);
    io::write_jsonl(&guard.track(stage_path(cfg, artifacts::CLUSTERS)), &clusters)?;
    clock.lap("cluster");

    let prior = prior_for(cfg, &frame)?;
    let refined = refined_for(&clusters, &prior);
    io::write_jsonl(&guard.track(stage_path(cfg, artifacts::REFINED)), &refined)?;
    if cfg.prior.export_heatmap {
        write_heatmap(&prior, &guard.track(cfg.paths.output_dir.join(artifacts::HEATMAP)))?;
    }
    let predictions_path = guard.track(cfg.paths.output_dir.join(artifacts::PREDICTIONS));
    io::write_json(&predictions_path, &io::predictions_geojson(&refined, &frame))?;
    clock.lap("apply-prior");

    let evaluation = match &cfg.paths.truth {
        None => None,
        Some(path) => {
            let truths: Vec<Site> = io::read_jsonl(path)?;
            let score = |cs: &[Cluster]| evaluate(&io::cluster_sites(cs, &frame), &truths, cfg.eval.tp_radius_m).1;
            Some(EvaluationSummary {
                pre_prior: score(&clusters),
                post_prior: score(&refined),
            })
        }
    };
    clock.lap("evaluate");

    let manifest_path = guard.track(cfg.paths.output_dir.join(artifacts::MANIFEST));
    let mut manifest = RunManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        frame_origin: frame.origin,
        timings: clock.timings,
        correction: CorrectionSummary::from(&correction),
        graph: GraphSummary {
            rays: graph.ray_count(),
            nodes: graph.node_count(),
            positives: labeling.positives().count(),
            energy: graph_energy,
        },
        refinement: RefinementSummary {
            clusters: refined.len(),
            kernels: prior.kernels().len(),
            mean_prior_displacement_m: mean_displacement(&clusters, &refined),
            prior_fallbacks: refined.iter().filter(|c| c.prior_fallback).count(),
        },
        evaluation,
        outputs: Vec::new(),
    };
    io::write_json(&manifest_path, &manifest)?;
    manifest.outputs = guard.commit();
    Ok(RunOutcome {
        manifest,
        frame,
        poses,
        graph,
        labeling,
        clusters,
        refined,
    })
}
