use super::energy::{energy, node_unary, ray_cost};
use super::{EnergyParams, Labeling, RayGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Graphs up to this size are solved by full enumeration.
pub const MAX_EXHAUSTIVE_NODES: usize = 20;

/// Flat view of the energy: per-node unaries and the rays each node sits on.
struct Model<'a> {
    unary: Vec<f64>,
    node_rays: Vec<[usize; 2]>,
    ray_nodes: &'a [Vec<usize>],
    params: &'a EnergyParams,
}

impl<'a> Model<'a> {
    fn new(graph: &'a RayGraph, params: &'a EnergyParams) -> Self {
        Self {
            unary: (0..graph.node_count()).map(|i| node_unary(graph, i, params)).collect(),
            node_rays: graph.nodes.iter().map(|n| n.ray_ids).collect(),
            ray_nodes: &graph.ray_nodes,
            params,
        }
    }

    fn n(&self) -> usize {
        self.unary.len()
    }

    fn occupancy(&self, z: &[bool]) -> Vec<usize> {
        self.ray_nodes
            .iter()
            .map(|l| l.iter().filter(|&&i| z[i]).count())
            .collect()
    }

    /// Same summation order as [`energy`], so values compare bit-for-bit.
    fn total(&self, z: &[bool], occ: &[usize]) -> f64 {
        let unary: f64 = (0..self.n()).filter(|&i| z[i]).map(|i| self.unary[i]).sum();
        let rays: f64 = occ.iter().map(|&k| ray_cost(k, self.params)).sum();
        unary + rays
    }

    fn flip_delta(&self, z: &[bool], occ: &[usize], i: usize) -> f64 {
        let p = self.params;
        let mut d = if z[i] { -self.unary[i] } else { self.unary[i] };
        for &r in &self.node_rays[i] {
            let k = occ[r];
            let k2 = if z[i] { k - 1 } else { k + 1 };
            d += ray_cost(k2, p) - ray_cost(k, p);
        }
        d
    }

    fn flip(&self, z: &mut [bool], occ: &mut [usize], i: usize) {
        for &r in &self.node_rays[i] {
            if z[i] {
                occ[r] -= 1;
            } else {
                occ[r] += 1;
            }
        }
        z[i] = !z[i];
    }

    /// Single flips, then moving an occupied slot to another node on the same
    /// ray, until neither improves.
    fn descend(&self, z: &mut [bool], occ: &mut [usize]) {
        const EPS: f64 = 1e-12;
        loop {
            let mut improved = false;
            for i in 0..self.n() {
                if self.flip_delta(z, occ, i) < -EPS {
                    self.flip(z, occ, i);
                    improved = true;
                }
            }
            for list in self.ray_nodes {
                for &i in list {
                    if !z[i] {
                        continue;
                    }
                    for &j in list {
                        if z[j] || j == i || !z[i] {
                            continue;
                        }
                        let d1 = self.flip_delta(z, occ, i);
                        self.flip(z, occ, i);
                        let d2 = self.flip_delta(z, occ, j);
                        if d1 + d2 < -EPS {
                            self.flip(z, occ, j);
                            improved = true;
                        } else {
                            self.flip(z, occ, i);
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
}

fn better(e: f64, z: &[bool], best_e: f64, best_z: &[bool]) -> bool {
    e < best_e || (e == best_e && z < best_z)
}

/// Global minimum by enumeration; ties go to the lexicographically smallest
/// label vector (node 0 most significant, `false < true`).
///
/// # Panics
/// When the graph has more than [`MAX_EXHAUSTIVE_NODES`] nodes.
pub fn solve_exhaustive(graph: &RayGraph, params: &EnergyParams) -> (Labeling, f64) {
    let model = Model::new(graph, params);
    let n = model.n();
    assert!(n <= MAX_EXHAUSTIVE_NODES, "{n} nodes is too many to enumerate");
    let mut z = vec![false; n];
    let mut best_z = z.clone();
    let mut best_e = f64::INFINITY;
    for m in 0u64..(1u64 << n) {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = (m >> (n - 1 - i)) & 1 == 1;
        }
        let occ = model.occupancy(&z);
        let e = model.total(&z, &occ);
        // counting upward visits label vectors in lexicographic order
        if e < best_e {
            best_e = e;
            best_z.copy_from_slice(&z);
        }
    }
    (Labeling { labels: best_z }, best_e)
}

/// Iterated conditional modes from a greedy start, with seeded random
/// restarts. Never worse than the all-zeros or all-ones labelings.
pub fn solve_icm(graph: &RayGraph, params: &EnergyParams) -> (Labeling, f64) {
    let model = Model::new(graph, params);
    let n = model.n();

    let mut best_z = vec![false; n];
    let mut best_e = model.total(&best_z, &model.occupancy(&best_z));
    let consider = |z: &[bool], occ: &[usize], best_z: &mut Vec<bool>, best_e: &mut f64| {
        let e = model.total(z, occ);
        if better(e, z, *best_e, best_z) {
            *best_e = e;
            best_z.copy_from_slice(z);
        }
    };

    let ones = vec![true; n];
    consider(&ones, &model.occupancy(&ones), &mut best_z, &mut best_e);

    // greedy: cheapest nodes first, kept when they lower the energy
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| model.unary[a].total_cmp(&model.unary[b]).then(a.cmp(&b)));
    let mut z = vec![false; n];
    let mut occ = model.occupancy(&z);
    for &i in &order {
        if model.flip_delta(&z, &occ, i) < 0.0 {
            model.flip(&mut z, &mut occ, i);
        }
    }
    model.descend(&mut z, &mut occ);
    consider(&z, &occ, &mut best_z, &mut best_e);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for restart in 0..params.restarts {
        let mut z: Vec<bool> = if restart % 2 == 0 {
            (0..n).map(|_| rng.gen_bool(0.5)).collect()
        } else {
            // kick the incumbent: flip roughly a quarter of the labels
            best_z.iter().map(|&b| b ^ rng.gen_bool(0.25)).collect()
        };
        let mut occ = model.occupancy(&z);
        model.descend(&mut z, &mut occ);
        consider(&z, &occ, &mut best_z, &mut best_e);
    }
    (Labeling { labels: best_z }, best_e)
}

/// Minimizes the occupancy energy: exact on small graphs, local search beyond.
pub fn solve_mrf(graph: &RayGraph, params: &EnergyParams) -> Labeling {
    let (labeling, e) = if graph.node_count() <= MAX_EXHAUSTIVE_NODES {
        solve_exhaustive(graph, params)
    } else {
        solve_icm(graph, params)
    };
    debug_assert_eq!(energy(graph, &labeling, params).ok(), Some(e));
    labeling
}
