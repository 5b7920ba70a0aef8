//! OpenStreetMap road and building prior.
//!
//! Roads and building outlines from an OSM XML extract are resampled every
//! few meters, and each sample carries a Gaussian kernel. Sites close to a
//! kernel get a small weight when a cluster position is averaged.

mod field;
mod parse;

pub use field::{
    build_prior_field, interpolate_nodes, Heatmap, KernelCenter, KernelClass, PriorField, PriorParams,
};
pub use parse::parse_osm_xml;

use crate::geodesy::{haversine_distance, GeoPoint};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OsmError {
    #[error("malformed OSM XML: {0}")]
    MalformedXml(String),
    #[error("way {way} references missing node {node}")]
    DanglingNodeRef { way: i64, node: i64 },
    #[error("building way {0} is not a closed ring")]
    OpenBuildingRing(i64),
    #[error("way {0} has fewer than two nodes")]
    DegenerateWay(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum WayKind {
    Road,
    Building,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsmWay {
    pub kind: WayKind,
    pub node_ids: Vec<i64>,
    pub tags: BTreeMap<String, String>,
}

/// Nodes and the road/building ways of an extract. Other ways are dropped at
/// parse time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OsmData {
    pub nodes: BTreeMap<i64, GeoPoint>,
    pub ways: BTreeMap<i64, OsmWay>,
}

impl OsmData {
    pub fn is_empty(&self) -> bool {
        self.ways.is_empty()
    }

    /// Vertex positions of a way, in order.
    pub fn geometry(&self, way: &OsmWay) -> Vec<GeoPoint> {
        way.node_ids.iter().map(|id| self.nodes[id]).collect()
    }

    pub fn ways_of(&self, kind: WayKind) -> impl Iterator<Item = (i64, &OsmWay)> + '_ {
        self.ways.iter().filter(move |(_, w)| w.kind == kind).map(|(&id, w)| (id, w))
    }

    /// Great-circle length of a way, meters.
    pub fn way_length(&self, way: &OsmWay) -> f64 {
        self.geometry(way).windows(2).map(|w| haversine_distance(w[0], w[1])).sum()
    }
}
