use super::{EnergyParams, Labeling, MrfError, RayGraph};

/// Depth disagreement of a node, summed over its two rays.
pub fn node_unary(graph: &RayGraph, node: usize, params: &EnergyParams) -> f64 {
    let n = &graph.nodes[node];
    let two_s2 = 2.0 * params.depth_sigma * params.depth_sigma;
    n.ray_ids
        .iter()
        .zip(n.distances.iter())
        .map(|(&r, &d)| {
            let e = d - graph.rays[r].depth_estimate;
            e * e / two_s2
        })
        .sum()
}

/// Cost a ray pays for holding `occupied` positive nodes.
pub fn ray_cost(occupied: usize, params: &EnergyParams) -> f64 {
    if occupied == 0 {
        params.occupancy_bias
    } else {
        params.pairwise_penalty * (occupied - 1) as f64
    }
}

/// Total energy of `labeling`: depth unaries of the occupied nodes, an
/// exclusivity penalty per extra occupied node on a ray and a bias per empty ray.
pub fn energy(graph: &RayGraph, labeling: &Labeling, params: &EnergyParams) -> Result<f64, MrfError> {
    if labeling.len() != graph.node_count() {
        return Err(MrfError::LabelMismatch {
            labels: labeling.len(),
            nodes: graph.node_count(),
        });
    }
    let unary: f64 = labeling.positives().map(|i| node_unary(graph, i, params)).sum();
    let rays: f64 = graph
        .ray_nodes
        .iter()
        .map(|list| ray_cost(list.iter().filter(|&&i| labeling.labels[i]).count(), params))
        .sum();
    Ok(unary + rays)
}
