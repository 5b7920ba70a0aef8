//! Essential matrix estimation (normalized 8-point inside RANSAC) and its
//! decomposition into a relative pose.
//!
//! Convention: for normalized image points `xa`, `xb` of the same scene
//! point, `xbᵀ·E·xa = 0` with `E = [t]ₓ·R` and `X_b = R·X_a + t`.

use super::camera::{midpoint, normalize_pixel};
use super::pose::{skew, PoseTransform};
use super::{Correspondence, SfmError};
use crate::panorama::Intrinsics;
use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const MIN_PAIRS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacOptions {
    pub iterations: usize,
    /// Sampson distance threshold in pixels.
    pub threshold_px: f64,
    pub seed: u64,
    /// Median parallax below which a pair is treated as a pure rotation.
    pub min_parallax_deg: f64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            threshold_px: 1.0,
            seed: 0,
            min_parallax_deg: 1.0,
        }
    }
}

/// A 3×3 matrix on the essential manifold, unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    pub fn from_pose(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        Self(project_to_essential(&(skew(translation) * rotation)))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialEstimate {
    pub matrix: EssentialMatrix,
    pub inliers: Vec<bool>,
    pub median_parallax_deg: f64,
}

impl EssentialEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

type Candidate = (Matrix3<f64>, Vector3<f64>);

fn homogeneous(x: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(x.x, x.y, 1.0)
}

/// First-order geometric distance of a match to the epipolar constraint,
/// in normalized image units.
pub fn sampson_distance(e: &Matrix3<f64>, xa: &Vector2<f64>, xb: &Vector2<f64>) -> f64 {
    let a = homogeneous(xa);
    let b = homogeneous(xb);
    let ea = e * a;
    let etb = e.transpose() * b;
    let num = b.dot(&ea);
    let den = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if den <= f64::MIN_POSITIVE {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num.abs() / den.sqrt()
}

/// Sets the singular values to `(σ, σ, 0)` and scales to unit norm.
pub fn project_to_essential(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut diag = Vector3::zeros();
    let sigma = std::f64::consts::FRAC_1_SQRT_2;
    diag[idx[0]] = sigma;
    diag[idx[1]] = sigma;
    u * Matrix3::from_diagonal(&diag) * v_t
}

fn hartley_transform(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Normalized linear 8-point estimate projected onto the essential manifold.
pub fn eight_point(xa: &[Vector2<f64>], xb: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = xa.len();
    if n < MIN_PAIRS || xb.len() != n {
        return None;
    }
    let ta = hartley_transform(xa);
    let tb = hartley_transform(xb);
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pa, pb)) in xa.iter().zip(xb).enumerate() {
        let p = ta * homogeneous(pa);
        let q = tb * homogeneous(pb);
        let row = [
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let f = v_t.row(min_idx);
    let en = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let e = tb.transpose() * en * ta;
    if !e.iter().all(|v| v.is_finite()) || e.norm() == 0.0 {
        return None;
    }
    Some(project_to_essential(&e))
}

/// Median angle left unexplained by the best pure-rotation fit of the
/// bearing vectors: near zero when the two views share a centre.
fn rotational_parallax_deg(xa: &[Vector2<f64>], xb: &[Vector2<f64>]) -> f64 {
    let a: Vec<Vector3<f64>> = xa.iter().map(|p| homogeneous(p).normalize()).collect();
    let b: Vec<Vector3<f64>> = xb.iter().map(|p| homogeneous(p).normalize()).collect();
    let m = a
        .iter()
        .zip(&b)
        .fold(Matrix3::zeros(), |acc, (a, b)| acc + b * a.transpose());
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    d[(2, 2)] = (u * v_t).determinant().signum();
    let r = u * d * v_t;
    let mut angles: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(a, b)| b.dot(&(r * a)).clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    angles.sort_by(f64::total_cmp);
    if angles.is_empty() {
        return 0.0;
    }
    let mid = angles.len() / 2;
    if angles.len().is_multiple_of(2) {
        0.5 * (angles[mid - 1] + angles[mid])
    } else {
        angles[mid]
    }
}

struct Scored {
    inliers: Vec<bool>,
    count: usize,
    score: f64,
}

fn score(e: &Matrix3<f64>, xa: &[Vector2<f64>], xb: &[Vector2<f64>], thr: f64) -> Scored {
    let mut inliers = Vec::with_capacity(xa.len());
    let mut count = 0;
    let mut score = 0.0;
    for (a, b) in xa.iter().zip(xb) {
        let d = sampson_distance(e, a, b);
        let inl = d < thr;
        if inl {
            count += 1;
            score += d * d;
        } else {
            score += thr * thr;
        }
        inliers.push(inl);
    }
    Scored {
        inliers,
        count,
        score,
    }
}

fn subset(points: &[Vector2<f64>], mask: &[bool]) -> Vec<Vector2<f64>> {
    points
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect()
}

/// Robust essential matrix for one view pair.
pub fn estimate_essential(
    c: &Correspondence,
    intrinsics_a: &Intrinsics,
    intrinsics_b: &Intrinsics,
    opts: &RansacOptions,
) -> Result<EssentialEstimate, SfmError> {
    let (xa, xb): (Vec<_>, Vec<_>) = c
        .pairs()
        .map(|(pa, pb)| (normalize_pixel(pa, intrinsics_a), normalize_pixel(pb, intrinsics_b)))
        .unzip();
    let focal = 0.5 * (intrinsics_a.focal_px + intrinsics_b.focal_px);
    estimate_essential_normalized(&xa, &xb, opts.threshold_px / focal, opts)
}

pub(crate) fn estimate_essential_normalized(
    xa: &[Vector2<f64>],
    xb: &[Vector2<f64>],
    threshold: f64,
    opts: &RansacOptions,
) -> Result<EssentialEstimate, SfmError> {
    let n = xa.len();
    if n < MIN_PAIRS {
        return Err(SfmError::Degenerate { consensus: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<Scored> = None;
    let iterations = if n == MIN_PAIRS { 1 } else { opts.iterations.max(1) };
    let mut sa = Vec::with_capacity(MIN_PAIRS);
    let mut sb = Vec::with_capacity(MIN_PAIRS);
    for _ in 0..iterations {
        sa.clear();
        sb.clear();
        for i in sample(&mut rng, n, MIN_PAIRS).iter() {
            sa.push(xa[i]);
            sb.push(xb[i]);
        }
        let Some(e) = eight_point(&sa, &sb) else { continue };
        let s = score(&e, xa, xb, threshold);
        let better = match &best {
            None => true,
            Some(b) => s.count > b.count || (s.count == b.count && s.score < b.score),
        };
        if better {
            best = Some(s);
        }
    }
    let mut mask = match best {
        Some(b) if b.count >= MIN_PAIRS => b.inliers,
        Some(b) => return Err(SfmError::Degenerate { consensus: b.count }),
        None => return Err(SfmError::Degenerate { consensus: 0 }),
    };
    // refit on the consensus set until the mask settles
    let mut e = Matrix3::zeros();
    for _ in 0..5 {
        let ca = subset(xa, &mask);
        let cb = subset(xb, &mask);
        e = eight_point(&ca, &cb).ok_or(SfmError::Degenerate { consensus: ca.len() })?;
        let s = score(&e, xa, xb, threshold);
        if s.count < MIN_PAIRS {
            return Err(SfmError::Degenerate { consensus: s.count });
        }
        let settled = s.inliers == mask;
        mask = s.inliers;
        if settled {
            break;
        }
    }
    let parallax = rotational_parallax_deg(&subset(xa, &mask), &subset(xb, &mask));
    if parallax < opts.min_parallax_deg {
        return Err(SfmError::PureRotation {
            parallax_deg: parallax,
            min_deg: opts.min_parallax_deg,
        });
    }
    Ok(EssentialEstimate {
        matrix: EssentialMatrix(e),
        inliers: mask,
        median_parallax_deg: parallax,
    })
}

/// The four `(R, t)` factorizations of `E`, `t` unit length.
pub fn pose_candidates(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let (mut u, mut v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // order singular values descending so the null direction is last
    let s = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let u_sorted = Matrix3::from_columns(&[u.column(idx[0]), u.column(idx[1]), u.column(idx[2])]);
    let v_sorted = Matrix3::from_rows(&[v_t.row(idx[0]), v_t.row(idx[1]), v_t.row(idx[2])]);
    u = u_sorted;
    v_t = v_sorted;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into();
    let t = t.normalize();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

fn in_front_count(r: &Matrix3<f64>, t: &Vector3<f64>, xa: &[Vector2<f64>], xb: &[Vector2<f64>]) -> usize {
    let ca = Vector3::zeros();
    let cb = -(r.transpose() * t);
    xa.iter()
        .zip(xb)
        .filter(|(a, b)| {
            let da = homogeneous(a);
            let db = r.transpose() * homogeneous(b);
            matches!(midpoint(&ca, &da, &cb, &db), Ok((_, s, u)) if s > 0.0 && u > 0.0)
        })
        .count()
}

/// Relative pose of view b with respect to view a (`t` unit length), chosen
/// by the cheirality vote over the given inlier matches.
pub fn decompose_essential(
    e: &EssentialMatrix,
    xa: &[Vector2<f64>],
    xb: &[Vector2<f64>],
) -> Result<PoseTransform, SfmError> {
    let total = xa.len().min(xb.len());
    let counts: Vec<(usize, Candidate)> = pose_candidates(&e.0)
        .into_iter()
        .map(|(r, t)| (in_front_count(&r, &t, xa, xb), (r, t)))
        .collect();
    let best = counts.iter().map(|c| c.0).max().unwrap_or(0);
    let winners = counts.iter().filter(|c| c.0 == best).count();
    if total == 0 || 2 * best <= total || winners != 1 {
        return Err(SfmError::AmbiguousCheirality { best, total });
    }
    let (_, (r, t)) = counts.into_iter().find(|c| c.0 == best).unwrap();
    Ok(PoseTransform::new(r, t))
}
