//! Geotagging of static street assets from street-view imagery metadata.
//!
//! The pipeline denoises camera poses with a GPS-fused bundle adjustment
//! ([`sfm`]), triangulates detections on a ray-intersection Markov random
//! field ([`mrf`]), merges positive intersections into clusters and pulls
//! each cluster away from roads and building edges with an OpenStreetMap
//! prior ([`refine`], [`osmprior`]). [`eval`] scores predictions against
//! ground truth and [`pipeline`] wires the stages to files.

pub mod eval;
pub mod geodesy;
pub mod mrf;
pub mod osmprior;
pub mod panorama;
pub mod pipeline;
pub mod refine;
pub mod sfm;
