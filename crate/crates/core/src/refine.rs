//! Merging positive intersection nodes into objects and placing each object
//! with the map prior.

use crate::geodesy::EnuPoint;
use crate::osmprior::PriorField;
use serde::{Deserialize, Serialize};

/// Below this total weight a cluster is considered fully penalized.
pub const MIN_WEIGHT_SUM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Indices of the member sites in the clustering input, ascending.
    pub members: Vec<usize>,
    pub sites: Vec<EnuPoint>,
    /// Prior weight per site; all ones until refined.
    pub weights: Vec<f64>,
    pub position: EnuPoint,
    pub weight_sum: f64,
    /// Every site was fully penalized and the plain mean was kept.
    pub prior_fallback: bool,
}

impl Cluster {
    fn from_members(members: Vec<usize>, all: &[EnuPoint]) -> Self {
        let sites: Vec<EnuPoint> = members.iter().map(|&i| all[i]).collect();
        let n = sites.len();
        Self {
            members,
            position: mean(&sites),
            weights: vec![1.0; n],
            weight_sum: n as f64,
            sites,
            prior_fallback: false,
        }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Largest distance between two member sites.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.sites.iter().enumerate() {
            for b in &self.sites[i + 1..] {
                d = d.max(a.distance(b));
            }
        }
        d
    }

    /// Replaces the position with the prior-weighted one.
    pub fn apply_prior(&mut self, prior: &PriorField) {
        let r = refine_cluster_position(&self.sites, prior);
        self.weights = r.weights;
        self.position = r.position;
        self.weight_sum = r.weight_sum;
        self.prior_fallback = r.fallback;
    }
}

pub fn mean(points: &[EnuPoint]) -> EnuPoint {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    EnuPoint::new(sx / n, sy / n)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so the representative is stable
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage agglomerative clustering: clusters merge while the closest
/// pair of sites between them is at most `threshold` apart. Clusters come out
/// ordered by their first member; positions are unweighted means.
pub fn cluster_positives(sites: &[EnuPoint], threshold: f64) -> Vec<Cluster> {
    let n = sites.len();
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = sites[i].distance(&sites[j]);
            if d <= threshold {
                edges.push((d, i, j));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut set = DisjointSet::new(n);
    for &(_, i, j) in &edges {
        set.union(i, j);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = set.find(i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups.into_iter().map(|g| Cluster::from_members(g, sites)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPosition {
    pub position: EnuPoint,
    pub weights: Vec<f64>,
    pub weight_sum: f64,
    pub fallback: bool,
}

/// `P = sum W(c_i) c_i / sum W(c_i)`. When the weights sum below
/// [`MIN_WEIGHT_SUM`] the unweighted mean is returned with `fallback` set.
///
/// # Panics
/// On an empty site list.
pub fn refine_cluster_position(sites: &[EnuPoint], prior: &PriorField) -> RefinedPosition {
    assert!(!sites.is_empty(), "cannot place an empty cluster");
    let weights: Vec<f64> = sites.iter().map(|&s| prior.weight_at(s)).collect();
    let weight_sum: f64 = weights.iter().sum();
    if weight_sum < MIN_WEIGHT_SUM {
        log::warn!("all {} sites fully penalized by the map prior; keeping the mean", sites.len());
        return RefinedPosition {
            position: mean(sites),
            weights,
            weight_sum,
            fallback: true,
        };
    }
    RefinedPosition {
        position: weighted_mean(sites, &weights),
        weights,
        weight_sum,
        fallback: false,
    }
}

/// `sum w_i p_i / sum w_i`.
pub fn weighted_mean(points: &[EnuPoint], weights: &[f64]) -> EnuPoint {
    let total: f64 = weights.iter().sum();
    let (sx, sy) = points
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(sx, sy), (p, &w)| (sx + w * p.x, sy + w * p.y));
    EnuPoint::new(sx / total, sy / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::osmprior::{KernelCenter, KernelClass};
    use proptest::prelude::*;

    fn road(points: &[(f64, f64)]) -> PriorField {
        let ks = points
            .iter()
            .map(|&(x, y)| KernelCenter {
                mu: EnuPoint::new(x, y),
                sigma: 2.0,
                class: KernelClass::Road,
            })
            .collect();
        PriorField::new(ks, 0.25, 3.0)
    }

    fn pts(v: &[(f64, f64)]) -> Vec<EnuPoint> {
        v.iter().map(|&(x, y)| EnuPoint::new(x, y)).collect()
    }

    #[test]
    fn close_pair_merges_at_midpoint() {
        let c = cluster_positives(&pts(&[(1.0, 1.0), (1.5, 1.0)]), 2.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].position, EnuPoint::new(1.25, 1.0));
        assert_eq!(c[0].members, vec![0, 1]);
    }

    #[test]
    fn distant_pair_stays_apart() {
        let c = cluster_positives(&pts(&[(0.0, 0.0), (10.0, 0.0)]), 2.0);
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].position, EnuPoint::new(10.0, 0.0));
    }

    #[test]
    fn chain_links_through_neighbours() {
        let chain: Vec<(f64, f64)> = (0..7).map(|i| (1.5 * f64::from(i), 0.0)).collect();
        let c = cluster_positives(&pts(&chain), 2.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 7);
        assert!((c[0].diameter() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input() {
        assert!(cluster_positives(&[], 2.0).is_empty());
    }

    #[test]
    fn no_kernels_means_plain_mean() {
        let sites = pts(&[(0.0, 0.0), (1.0, 0.5), (0.3, -0.2)]);
        let mut c = cluster_positives(&sites, 2.0).remove(0);
        let before = c.position;
        c.apply_prior(&PriorField::empty());
        assert_eq!(c.position, before);
        assert!(!c.prior_fallback);
        assert_eq!(c.weight_sum, 3.0);
    }

    #[test]
    fn zero_weight_site_is_ignored() {
        let r = refine_cluster_position(&pts(&[(0.0, 0.0), (10.0, 0.0)]), &road(&[(0.0, 0.0)]));
        assert_eq!(r.weights, vec![0.0, 1.0]);
        assert_eq!(r.position, EnuPoint::new(10.0, 0.0));
    }

    #[test]
    fn fully_penalized_cluster_falls_back() {
        let r = refine_cluster_position(&pts(&[(0.0, 0.0), (4.0, 0.0)]), &road(&[(0.0, 0.0), (4.0, 0.0)]));
        assert!(r.fallback);
        assert_eq!(r.position, EnuPoint::new(2.0, 0.0));
    }

    #[test]
    fn straddling_sites_match_direct_evaluation() {
        // road centerline along y = 0, kernels every 5 m
        let line: Vec<(f64, f64)> = (-4..=4).map(|i| (5.0 * f64::from(i), 0.0)).collect();
        let prior = road(&line);
        let sites = pts(&[(1.0, -1.0), (1.0, 0.5), (1.0, 3.0)]);
        let w = |p: &EnuPoint| {
            let s: f64 = line
                .iter()
                .map(|&(x, y)| {
                    let d2 = (p.x - x).powi(2) + (p.y - y).powi(2);
                    if d2.sqrt() <= 6.0 {
                        (-d2 / 8.0).exp()
                    } else {
                        0.0
                    }
                })
                .sum();
            1.0 - s.min(1.0)
        };
        let ws: Vec<f64> = sites.iter().map(w).collect();
        let total: f64 = ws.iter().sum();
        let px = sites.iter().zip(&ws).map(|(p, w)| w * p.x).sum::<f64>() / total;
        let py = sites.iter().zip(&ws).map(|(p, w)| w * p.y).sum::<f64>() / total;
        let r = refine_cluster_position(&sites, &prior);
        assert!(r.position.distance(&EnuPoint::new(px, py)) < 1e-9);
        // pulled off the centerline toward the far site
        assert!(r.position.y > mean(&sites).y);
    }

    fn arb_sites() -> impl Strategy<Value = Vec<EnuPoint>> {
        prop::collection::vec((-6.0..6.0f64, -6.0..6.0f64).prop_map(|(x, y)| EnuPoint::new(x, y)), 1..8)
    }

    proptest! {
        #[test]
        fn position_ignores_site_order(sites in arb_sites(), k in 0usize..8) {
            let prior = road(&[(0.0, 0.0), (5.0, 0.0), (-5.0, 0.0)]);
            let a = refine_cluster_position(&sites, &prior);
            let mut perm = sites.clone();
            let k = k % perm.len();
            perm.rotate_left(k);
            perm.reverse();
            let b = refine_cluster_position(&perm, &prior);
            prop_assert!(a.position.distance(&b.position) < 1e-9);
        }

        #[test]
        fn position_inside_bounding_box(sites in arb_sites()) {
            let prior = road(&[(0.0, 0.0), (3.0, 1.0)]);
            let p = refine_cluster_position(&sites, &prior).position;
            let (lo_x, hi_x) = sites.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s.x), b.max(s.x)));
            let (lo_y, hi_y) = sites.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s.y), b.max(s.y)));
            prop_assert!(p.x >= lo_x - 1e-9 && p.x <= hi_x + 1e-9);
            prop_assert!(p.y >= lo_y - 1e-9 && p.y <= hi_y + 1e-9);
        }

        #[test]
        fn equal_weights_leave_the_mean(sites in arb_sites(), w in 1e-6..1.0f64) {
            let p = weighted_mean(&sites, &vec![w; sites.len()]);
            prop_assert!(p.distance(&mean(&sites)) < 1e-12);
        }

        #[test]
        fn uniform_prior_reproduces_clustering(sites in arb_sites(), far in 20.0..100.0f64) {
            let prior = road(&[(far, far)]);
            for c in cluster_positives(&sites, 2.0) {
                let mut refined = c.clone();
                refined.apply_prior(&prior);
                prop_assert_eq!(refined.position, c.position);
            }
        }

        #[test]
        fn clusters_partition_and_respect_gap(sites in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 0..30), t in 0.5..4.0f64) {
            let sites: Vec<EnuPoint> = sites.into_iter().map(|(x, y)| EnuPoint::new(x, y)).collect();
            let cs = cluster_positives(&sites, t);
            let mut seen: Vec<usize> = cs.iter().flat_map(|c| c.members.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..sites.len()).collect::<Vec<_>>());
            for (i, a) in cs.iter().enumerate() {
                for b in &cs[i + 1..] {
                    for p in &a.sites {
                        for q in &b.sites {
                            prop_assert!(p.distance(q) > t);
                        }
                    }
                }
            }
        }
    }
}
