//! Reading and writing the pipeline's files.

use super::PipelineError;
use crate::eval::Site;
use crate::geodesy::{Bearing, GeoPoint, LocalFrame};
use crate::refine::Cluster;
use crate::sfm::CameraPose;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub camera_id: String,
    pub lat: f64,
    pub lon: f64,
    pub heading_deg: f64,
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> PipelineError {
    PipelineError::Schema {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Camera metadata, localized in a frame centred on the cameras' centroid.
pub fn read_cameras(path: &Path) -> Result<(Vec<CameraPose>, LocalFrame), PipelineError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| schema(path, 1, e.to_string()))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.deserialize::<CameraRecord>() {
        let rec = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            schema(path, line, e.to_string())
        })?;
        let line = records.len() + 2;
        let position = GeoPoint::new(rec.lat, rec.lon).map_err(|e| schema(path, line, e.to_string()))?;
        if !rec.heading_deg.is_finite() {
            return Err(schema(path, line, "heading_deg is not finite"));
        }
        if !seen.insert(rec.camera_id.clone()) {
            return Err(schema(path, line, format!("duplicate camera_id {:?}", rec.camera_id)));
        }
        records.push((rec.camera_id, position, Bearing::new(rec.heading_deg)));
    }
    let points: Vec<GeoPoint> = records.iter().map(|r| r.1).collect();
    let origin = GeoPoint::centroid(&points).ok_or_else(|| schema(path, 1, "no cameras"))?;
    let frame = LocalFrame::new(origin);
    for (i, p) in points.iter().enumerate() {
        frame
            .to_enu(*p)
            .map_err(|e| schema(path, i + 2, format!("camera too far from the others: {e}")))?;
    }
    let cams = records
        .into_iter()
        .map(|(id, pos, heading)| CameraPose::new(&id, pos, heading, &frame))
        .collect();
    Ok((cams, frame))
}

pub fn write_cameras(path: &Path, cams: &[CameraRecord]) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Config(e.to_string()))?;
    for c in cams {
        w.serialize(c).map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

/// One JSON value per non-blank line; errors name the line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| schema(path, i + 1, e.to_string())))
        .collect()
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| PipelineError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| PipelineError::io(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::io(path, e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| schema(path, e.line(), e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

/// Identifier of the `i`-th predicted object.
pub fn prediction_id(i: usize) -> String {
    format!("obj-{i:04}")
}

/// Clusters as predicted object sites.
pub fn cluster_sites(clusters: &[Cluster], frame: &LocalFrame) -> Vec<Site> {
    clusters
        .iter()
        .enumerate()
        .map(|(i, c)| Site::new(prediction_id(i), frame.from_enu(c.position)))
        .collect()
}

/// A GeoJSON FeatureCollection with one Point per cluster.
pub fn predictions_geojson(clusters: &[Cluster], frame: &LocalFrame) -> Value {
    let features: Vec<Value> = clusters
        .iter()
        .zip(cluster_sites(clusters, frame))
        .map(|(c, s)| {
            json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [s.lon, s.lat] },
                "properties": {
                    "id": s.id,
                    "n_sites": c.len(),
                    "weight_sum": c.weight_sum,
                    "prior_fallback": c.prior_fallback,
                },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

/// Point features of a FeatureCollection; ids from `properties.id`, else
/// the feature's position in the file.
pub fn read_predictions_geojson(path: &Path) -> Result<Vec<Site>, PipelineError> {
    let v: Value = read_json(path)?;
    let bad = |m: String| schema(path, 0, m);
    if v.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(bad("not a FeatureCollection".into()));
    }
    let features = v
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing features array".into()))?;
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let coords = f
                .pointer("/geometry/coordinates")
                .and_then(Value::as_array)
                .filter(|c| f.pointer("/geometry/type").and_then(Value::as_str) == Some("Point") && c.len() >= 2)
                .ok_or_else(|| bad(format!("feature {i} is not a Point")))?;
            let lon = coords[0].as_f64().ok_or_else(|| bad(format!("feature {i}: bad longitude")))?;
            let lat = coords[1].as_f64().ok_or_else(|| bad(format!("feature {i}: bad latitude")))?;
            let id = f
                .pointer("/properties/id")
                .and_then(Value::as_str)
                .map_or_else(|| prediction_id(i), str::to_string);
            Ok(Site { id, lat, lon })
        })
        .collect()
}

/// Files written during a run, deleted again unless the run completes.
#[derive(Debug, Default)]
pub struct OutputGuard {
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn track(&mut self, path: PathBuf) -> PathBuf {
        self.written.push(path.clone());
        path
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            if p.exists() {
                log::info!("removing partial output {}", p.display());
                let _ = fs::remove_file(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::EnuPoint;
    use crate::mrf::Detection;

    #[test]
    fn cameras_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.csv");
        let recs = vec![
            CameraRecord { camera_id: "a".into(), lat: 53.35, lon: -6.26, heading_deg: 10.0 },
            CameraRecord { camera_id: "b".into(), lat: 53.3501, lon: -6.2601, heading_deg: 370.0 },
        ];
        write_cameras(&path, &recs).unwrap();
        let (cams, frame) = read_cameras(&path).unwrap();
        assert_eq!(cams.len(), 2);
        assert_eq!(cams[1].heading.degrees(), 10.0);
        assert!((frame.origin.lat - 53.35005).abs() < 1e-12);
        assert!(cams[0].enu.norm() > 5.0);
    }

    #[test]
    fn camera_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.csv");
        fs::write(&path, "camera_id,lat,lon,heading_deg\na,53.3,-6.2,0\nb,north,-6.2,0\n").unwrap();
        let err = read_cameras(&path).unwrap_err();
        assert!(matches!(err, PipelineError::Schema { line: 3, .. }), "{err}");
        fs::write(&path, "camera_id,lat,lon,heading_deg\na,53.3,-6.2,0\na,53.3,-6.2,0\n").unwrap();
        assert!(matches!(read_cameras(&path).unwrap_err(), PipelineError::Schema { line: 3, .. }));
        fs::write(&path, "camera_id,lat,lon,heading_deg\n").unwrap();
        assert!(read_cameras(&path).is_err());
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            "{\"camera_id\":\"a\",\"bearing_deg\":3,\"depth_m\":4}\n\n{\"camera_id\":\"a\",\"depth_m\":4}\n",
        )
        .unwrap();
        let err = read_jsonl::<Detection>(&path).unwrap_err();
        assert!(matches!(err, PipelineError::Schema { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("d.jsonl:3"));
    }

    #[test]
    fn geojson_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = LocalFrame::new(GeoPoint::new(53.3, -6.2).unwrap());
        let clusters = crate::refine::cluster_positives(&[EnuPoint::new(3.0, 4.0), EnuPoint::new(30.0, 4.0)], 2.0);
        let path = dir.path().join("p.geojson");
        write_json(&path, &predictions_geojson(&clusters, &frame)).unwrap();
        let sites = read_predictions_geojson(&path).unwrap();
        assert_eq!(sites, cluster_sites(&clusters, &frame));
        let v: Value = read_json(&path).unwrap();
        assert_eq!(v["features"][0]["properties"]["n_sites"], 1);
        assert_eq!(v["features"][1]["properties"]["prior_fallback"], false);
    }

    #[test]
    fn guard_removes_uncommitted_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        {
            let mut g = OutputGuard::default();
            write_text(&g.track(a.clone()), "x").unwrap();
        }
        assert!(!a.exists());
        let mut g = OutputGuard::default();
        write_text(&g.track(a.clone()), "x").unwrap();
        assert_eq!(g.commit(), vec![a.clone()]);
        assert!(a.exists());
    }
}
