use super::{EnergyParams, ObservationRay};
use crate::geodesy::EnuPoint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Where two forward rays cross.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionNode {
    pub node_id: usize,
    pub position: EnuPoint,
    /// Indices into [`RayGraph::rays`], lower index first.
    pub ray_ids: [usize; 2],
    /// Distance along each ray, same order as `ray_ids`.
    pub distances: [f64; 2],
    pub angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayGraph {
    pub rays: Vec<ObservationRay>,
    pub nodes: Vec<IntersectionNode>,
    /// Node ids on each ray, nearest first.
    pub ray_nodes: Vec<Vec<usize>>,
}

impl RayGraph {
    /// Reassembles a graph from stored rays and nodes.
    pub fn from_parts(rays: Vec<ObservationRay>, mut nodes: Vec<IntersectionNode>) -> Self {
        for (i, n) in nodes.iter_mut().enumerate() {
            n.node_id = i;
        }
        let mut ray_nodes: Vec<Vec<usize>> = vec![Vec::new(); rays.len()];
        for n in &nodes {
            for r in n.ray_ids {
                ray_nodes[r].push(n.node_id);
            }
        }
        for (r, list) in ray_nodes.iter_mut().enumerate() {
            list.sort_by(|&a, &b| {
                let da = nodes[a].distance_on(r).unwrap_or(f64::INFINITY);
                let db = nodes[b].distance_on(r).unwrap_or(f64::INFINITY);
                da.total_cmp(&db).then(a.cmp(&b))
            });
        }
        Self { rays, nodes, ray_nodes }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn ray_count(&self) -> usize {
        self.rays.len()
    }
}

impl IntersectionNode {
    pub fn distance_on(&self, ray: usize) -> Option<f64> {
        self.ray_ids.iter().position(|&r| r == ray).map(|k| self.distances[k])
    }
}

/// Closed-form crossing of two forward half-lines. Returns the position,
/// both distances and the angle between the rays, or `None` when the rays are
/// parallel or meet behind either origin.
pub fn intersect_rays(a: &ObservationRay, b: &ObservationRay) -> Option<(EnuPoint, f64, f64, f64)> {
    let (ax, ay) = a.direction();
    let (bx, by) = b.direction();
    let cross = ax * by - ay * bx;
    if cross.abs() < 1e-12 {
        return None;
    }
    let wx = b.origin.x - a.origin.x;
    let wy = b.origin.y - a.origin.y;
    let da = (wx * by - wy * bx) / cross;
    let db = (wx * ay - wy * ax) / cross;
    if !(da > 0.0 && db > 0.0) {
        return None;
    }
    let angle = (ax * bx + ay * by).clamp(-1.0, 1.0).acos().to_degrees();
    Some((a.point_at(da), da, db, angle))
}

/// One node for every pair of rays from different cameras that cross within
/// `max_depth` of both origins at an angle inside `[min_angle, 180 - min_angle]`.
pub fn build_intersection_graph(rays: &[ObservationRay], params: &EnergyParams) -> RayGraph {
    let n = rays.len();
    let nodes: Vec<IntersectionNode> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..n).filter_map(move |j| {
                let (a, b) = (&rays[i], &rays[j]);
                if a.camera_id == b.camera_id {
                    return None;
                }
                let (position, da, db, angle) = intersect_rays(a, b)?;
                let depth_ok = da <= params.max_depth && db <= params.max_depth;
                let angle_ok = angle >= params.min_angle && angle <= 180.0 - params.min_angle;
                (depth_ok && angle_ok).then_some(IntersectionNode {
                    node_id: 0,
                    position,
                    ray_ids: [i, j],
                    distances: [da, db],
                    angle_deg: angle,
                })
            })
        })
        .collect();
    RayGraph::from_parts(rays.to_vec(), nodes)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geodesy::Bearing;
    use proptest::prelude::*;

    pub(crate) fn ray(id: usize, cam: &str, x: f64, y: f64, bearing: f64, depth: f64) -> ObservationRay {
        ObservationRay {
            ray_id: id,
            camera_id: cam.to_string(),
            origin: EnuPoint::new(x, y),
            bearing: Bearing::new(bearing),
            depth_estimate: depth,
        }
    }

    #[test]
    fn perpendicular_rays_meet_at_5_0() {
        let rays = [ray(0, "a", 0.0, 0.0, 90.0, 5.0), ray(1, "b", 5.0, -5.0, 0.0, 5.0)];
        let g = build_intersection_graph(&rays, &EnergyParams::default());
        assert_eq!(g.node_count(), 1);
        let n = &g.nodes[0];
        assert!(n.position.distance(&EnuPoint::new(5.0, 0.0)) < 1e-12);
        assert!((n.distances[0] - 5.0).abs() < 1e-12);
        assert!((n.distances[1] - 5.0).abs() < 1e-12);
        assert!((n.angle_deg - 90.0).abs() < 1e-12);
        assert_eq!(g.ray_nodes, vec![vec![0], vec![0]]);
    }

    #[test]
    fn parallel_rays_do_not_meet() {
        let rays = [ray(0, "a", 0.0, 0.0, 0.0, 5.0), ray(1, "b", 3.0, 0.0, 0.0, 5.0)];
        assert_eq!(build_intersection_graph(&rays, &EnergyParams::default()).node_count(), 0);
    }

    #[test]
    fn crossing_behind_a_ray_is_excluded() {
        let rays = [ray(0, "a", 0.0, 0.0, 90.0, 5.0), ray(1, "b", 5.0, 5.0, 180.0, 5.0)];
        // the lines cross at (5, 0), which is ahead of both
        assert_eq!(build_intersection_graph(&rays, &EnergyParams::default()).node_count(), 1);
        let rays = [ray(0, "a", 0.0, 0.0, 90.0, 5.0), ray(1, "b", 5.0, -5.0, 180.0, 5.0)];
        assert_eq!(build_intersection_graph(&rays, &EnergyParams::default()).node_count(), 0);
    }

    #[test]
    fn depth_and_angle_limits() {
        let p = EnergyParams::default();
        // meets 30 m out
        let far = [ray(0, "a", 0.0, 0.0, 90.0, 5.0), ray(1, "b", 30.0, -5.0, 0.0, 5.0)];
        assert_eq!(build_intersection_graph(&far, &p).node_count(), 0);
        // 5 deg apart
        let shallow = [ray(0, "a", 0.0, 0.0, 0.0, 5.0), ray(1, "b", 1.0, 0.0, 355.0, 5.0)];
        assert_eq!(build_intersection_graph(&shallow, &p).node_count(), 0);
        let loose = EnergyParams { min_angle: 1.0, ..p };
        assert_eq!(build_intersection_graph(&shallow, &loose).node_count(), 1);
    }

    #[test]
    fn same_camera_rays_are_not_paired() {
        let rays = [ray(0, "a", 0.0, 0.0, 0.0, 5.0), ray(1, "a", 0.0, 0.0, 90.0, 5.0)];
        assert_eq!(build_intersection_graph(&rays, &EnergyParams::default()).node_count(), 0);
    }

    #[test]
    fn ray_lists_sorted_by_distance() {
        let rays = [
            ray(0, "a", 0.0, 0.0, 90.0, 5.0),
            ray(1, "b", 8.0, -5.0, 0.0, 5.0),
            ray(2, "c", 3.0, -5.0, 0.0, 5.0),
            ray(3, "d", 12.0, -5.0, 0.0, 5.0),
        ];
        let g = build_intersection_graph(&rays, &EnergyParams::default());
        let d: Vec<f64> = g.ray_nodes[0].iter().map(|&n| g.nodes[n].distance_on(0).unwrap()).collect();
        assert_eq!(d.len(), 3);
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
        for n in &g.nodes {
            let count = g.ray_nodes.iter().filter(|l| l.contains(&n.node_id)).count();
            assert_eq!(count, 2);
        }
    }

    fn arb_rays() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
        prop::collection::vec((-15.0..15.0f64, -15.0..15.0f64, 0.0..360.0f64), 2..9)
    }

    proptest! {
        #[test]
        fn permuting_rays_keeps_node_set(spec in arb_rays(), rot in 0usize..8) {
            let rays: Vec<ObservationRay> = spec
                .iter()
                .enumerate()
                .map(|(i, &(x, y, b))| ray(i, &format!("c{i}"), x, y, b, 5.0))
                .collect();
            let mut perm = rays.clone();
            let k = rot % perm.len();
            perm.rotate_left(k);
            perm.reverse();
            let p = EnergyParams::default();
            let g1 = build_intersection_graph(&rays, &p);
            let g2 = build_intersection_graph(&perm, &p);
            prop_assert_eq!(g1.node_count(), g2.node_count());
            for n in &g1.nodes {
                let ids = [rays[n.ray_ids[0]].ray_id, rays[n.ray_ids[1]].ray_id];
                let twin = g2.nodes.iter().find(|m| {
                    let mid = [perm[m.ray_ids[0]].ray_id, perm[m.ray_ids[1]].ray_id];
                    (mid[0] == ids[0] && mid[1] == ids[1]) || (mid[0] == ids[1] && mid[1] == ids[0])
                });
                let twin = twin.expect("matching node");
                prop_assert!(twin.position.distance(&n.position) < 1e-9);
            }
        }

        #[test]
        fn nodes_lie_on_both_rays(spec in arb_rays()) {
            let rays: Vec<ObservationRay> = spec
                .iter()
                .enumerate()
                .map(|(i, &(x, y, b))| ray(i, &format!("c{i}"), x, y, b, 5.0))
                .collect();
            let g = build_intersection_graph(&rays, &EnergyParams::default());
            for n in &g.nodes {
                for k in 0..2 {
                    let r = &g.rays[n.ray_ids[k]];
                    prop_assert!(n.distances[k] > 0.0 && n.distances[k] <= 25.0);
                    prop_assert!(r.point_at(n.distances[k]).distance(&n.position) < 1e-9);
                }
                prop_assert!(n.angle_deg >= 10.0 && n.angle_deg <= 170.0);
            }
        }
    }
}
