//! Scoring predicted object positions against surveyed ground truth.

use crate::geodesy::{haversine_distance, GeoPoint};
use serde::{Deserialize, Serialize};

/// A prediction counts as a true positive within this many meters.
pub const DEFAULT_TP_RADIUS_M: f64 = 6.0;

/// An identified position, as found in ground-truth and prediction files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

impl Site {
    pub fn new(id: impl Into<String>, p: GeoPoint) -> Self {
        Self {
            id: id.into(),
            lat: p.lat,
            lon: p.lon,
        }
    }

    pub fn point(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub prediction_id: String,
    pub truth_id: String,
    pub distance_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Accepted pairs, nearest first.
    pub pairs: Vec<MatchedPair>,
    pub unmatched_predictions: Vec<String>,
    pub unmatched_truths: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_actual: usize,
    pub n_detected: usize,
    pub tp: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// Mean great-circle distance over matched pairs; absent without matches.
    pub mean_error_m: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(n_actual: usize, n_detected: usize, tp: usize, mean_error_m: Option<f64>) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, n_detected);
        let recall = ratio(tp, n_actual);
        let f_measure = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            n_actual,
            n_detected,
            tp,
            precision,
            recall,
            f_measure,
            mean_error_m,
        }
    }
}

/// Greedy one-to-one matching: all pairs within `tp_radius` are taken in
/// order of distance (ties by prediction id, then truth id), skipping pairs
/// whose prediction or truth is already used.
pub fn match_predictions(predictions: &[Site], truths: &[Site], tp_radius: f64) -> MatchResult {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let d = haversine_distance(p.point(), t.point());
            if d <= tp_radius {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| predictions[a.1].id.cmp(&predictions[b.1].id))
            .then_with(|| truths[a.2].id.cmp(&truths[b.2].id))
    });
    let mut used_p = vec![false; predictions.len()];
    let mut used_t = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for (d, i, j) in candidates {
        if used_p[i] || used_t[j] {
            continue;
        }
        used_p[i] = true;
        used_t[j] = true;
        pairs.push(MatchedPair {
            prediction_id: predictions[i].id.clone(),
            truth_id: truths[j].id.clone(),
            distance_m: d,
        });
    }
    let leftovers = |sites: &[Site], used: &[bool]| {
        let mut ids: Vec<String> = sites
            .iter()
            .zip(used)
            .filter(|(_, &u)| !u)
            .map(|(s, _)| s.id.clone())
            .collect();
        ids.sort();
        ids
    };
    MatchResult {
        unmatched_predictions: leftovers(predictions, &used_p),
        unmatched_truths: leftovers(truths, &used_t),
        pairs,
    }
}

pub fn compute_metrics(m: &MatchResult, n_actual: usize, n_detected: usize) -> EvalReport {
    let tp = m.pairs.len();
    let mean = (tp > 0).then(|| m.pairs.iter().map(|p| p.distance_m).sum::<f64>() / tp as f64);
    EvalReport::from_counts(n_actual, n_detected, tp, mean)
}

/// Matches and scores in one go.
pub fn evaluate(predictions: &[Site], truths: &[Site], tp_radius: f64) -> (MatchResult, EvalReport) {
    let m = match_predictions(predictions, truths, tp_radius);
    let r = compute_metrics(&m, truths.len(), predictions.len());
    (m, r)
}

/// Cuts `x` to `decimals` places, the way score tables usually print them.
pub fn truncate_decimals(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    ((x * s) + 1e-9).floor() / s
}
