//! GPS-fused bundle adjustment over panorama rigs.
//!
//! Each rig has a world→camera rotation `R` (of its view 0) and a centre
//! `C`; each track a 3D point `X`. The objective is
//!
//! ```text
//! Σ_obs ρ(‖π(R_k·R·(X − C)) − x‖²)            Huber ρ with threshold δ px
//!   + λ_g Σ_cam ‖C − C_gps‖²
//!   + λ_h Σ_cam angdiff(heading(R), heading_meta)²      degrees
//!   + λ_t Σ_cam (pitch² + roll²)                          degrees, small-angle
//! ```
//!
//! minimized with Levenberg–Marquardt (Marquardt diagonal scaling, Nielsen
//! damping update). Points are eliminated with the Schur complement so the
//! dense system only involves camera parameters. Rotation increments are
//! axis-angle vectors applied on the left, `R ← exp([δ]ₓ)·R`.

use super::pose::{exp_so3, heading_of, orthonormalize, view_rotation};
use super::SfmError;
use crate::geodesy::{wrap_angle_deg, Bearing};
use crate::panorama::{Intrinsics, PixelCoord, VIEW_YAW_STEP_DEG};
use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Matrix6x3, RowVector3, Vector2, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};

const RAD2DEG: f64 = 180.0 / std::f64::consts::PI;
const MIN_DEPTH: f64 = 1e-6;

/// Camera state and priors for bundle adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct BaCamera {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub prior_center: Vector3<f64>,
    pub prior_heading: Bearing,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub view_index: u8,
    pub pixel: PixelCoord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub point: Vector3<f64>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleOptions {
    /// λ_g, per m² of GPS deviation. Must be positive: it fixes the gauge.
    pub gps_weight: f64,
    /// λ_h, per deg² of heading deviation.
    pub heading_weight: f64,
    /// λ_t, per deg² of pitch/roll away from level.
    pub tilt_weight: f64,
    /// Huber threshold on the reprojection residual norm, pixels.
    pub robust_delta: f64,
    pub max_iters: usize,
    /// Relative cost decrease below which the solver stops.
    pub tol: f64,
    /// When false only camera centres and points move.
    pub optimize_rotation: bool,
    pub initial_damping: f64,
    pub max_damping: f64,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            // 2 m of GPS deviation costs the same as a 2 px residual
            gps_weight: 1.0,
            heading_weight: 1.0,
            tilt_weight: 100.0,
            robust_delta: 2.0,
            max_iters: 100,
            tol: 1e-10,
            optimize_rotation: true,
            initial_damping: 1e-4,
            max_damping: 1e16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative decrease fell below `tol`, or the cost reached zero.
    Converged,
    MaxIterations,
    /// No further step could be accepted after earlier progress.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Objective after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub gradient_norm: f64,
    pub initial_gradient_norm: f64,
    pub termination: Termination,
    pub final_damping: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleResult {
    pub cameras: Vec<BaCamera>,
    pub tracks: Vec<Track>,
    pub report: BundleReport,
}

/// Residual of one observation and its derivatives with respect to the
/// rotation increment, the camera centre and the point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionJacobian {
    pub residual: Vector2<f64>,
    pub d_rotation: Matrix2x3<f64>,
    pub d_center: Matrix2x3<f64>,
    pub d_point: Matrix2x3<f64>,
}

/// `None` when the point is not in front of the observing view.
pub fn reprojection_residual(
    rotation: &Matrix3<f64>,
    center: &Vector3<f64>,
    point: &Vector3<f64>,
    obs: &Observation,
    k: &Intrinsics,
) -> Option<ReprojectionJacobian> {
    let rk = view_rotation(VIEW_YAW_STEP_DEG * f64::from(obs.view_index));
    let p_rig = rotation * (point - center);
    let p = rk * p_rig;
    if p.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / p.z;
    let f = k.focal_px;
    let residual = Vector2::new(k.cx + f * p.x * iz - obs.pixel.u, k.cy + f * p.y * iz - obs.pixel.v);
    let d_proj = Matrix2x3::new(f * iz, 0.0, -f * p.x * iz * iz, 0.0, f * iz, -f * p.y * iz * iz);
    let rkr = rk * rotation;
    Some(ReprojectionJacobian {
        residual,
        d_rotation: d_proj * rk * (-super::pose::skew(&p_rig)),
        d_center: -(d_proj * rkr),
        d_point: d_proj * rkr,
    })
}

/// Wrapped heading deviation in degrees and its derivative with respect to
/// the rotation increment.
pub fn heading_residual(rotation: &Matrix3<f64>, prior: Bearing) -> (f64, RowVector3<f64>) {
    let right: Vector3<f64> = rotation.row(0).transpose();
    let down: Vector3<f64> = rotation.row(1).transpose();
    let fwd: Vector3<f64> = rotation.row(2).transpose();
    let r = wrap_angle_deg(heading_of(rotation).degrees() - prior.degrees());
    // d fwd / dδ has columns (down, -right, 0)
    let h2 = fwd.x * fwd.x + fwd.y * fwd.y;
    let dh = RowVector3::new(fwd.y, -fwd.x, 0.0) * (RAD2DEG / h2.max(1e-300));
    let d_fwd = Matrix3::from_columns(&[down, -right, Vector3::zeros()]);
    (r, dh * d_fwd)
}

/// Roll and pitch away from level (world-up components of the right and
/// forward axes, in degrees) and their derivatives.
pub fn tilt_residual(rotation: &Matrix3<f64>) -> (Vector2<f64>, Matrix2x3<f64>) {
    let right = rotation.row(0);
    let down = rotation.row(1);
    let fwd = rotation.row(2);
    let r = Vector2::new(right[2], fwd[2]) * RAD2DEG;
    // d right/dδ = (0, fwd, -down), d fwd/dδ = (down, -right, 0)
    let j = Matrix2x3::new(0.0, fwd[2], -down[2], down[2], -right[2], 0.0) * RAD2DEG;
    (r, j)
}

fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        1.0
    } else {
        delta / s.sqrt()
    }
}

/// Full objective; infinite if any point falls behind an observing view.
pub(crate) fn total_cost(cameras: &[BaCamera], tracks: &[Track], k: &Intrinsics, opts: &BundleOptions) -> f64 {
    let mut cost = 0.0;
    for t in tracks {
        for o in &t.observations {
            let c = &cameras[o.camera];
            match reprojection_residual(&c.rotation, &c.center, &t.point, o, k) {
                Some(j) => cost += huber(j.residual.norm_squared(), opts.robust_delta),
                None => return f64::INFINITY,
            }
        }
    }
    for c in cameras {
        cost += prior_cost(c, opts);
    }
    cost
}

fn prior_cost(c: &BaCamera, opts: &BundleOptions) -> f64 {
    let (h, _) = heading_residual(&c.rotation, c.prior_heading);
    let (t, _) = tilt_residual(&c.rotation);
    opts.gps_weight * (c.center - c.prior_center).norm_squared()
        + opts.heading_weight * h * h
        + opts.tilt_weight * t.norm_squared()
}

/// Gauss–Newton blocks at the current state.
struct Normal {
    u: Vec<Matrix6<f64>>,
    gc: Vec<Vector6<f64>>,
    v: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
    /// Per track, camera coupling blocks merged by camera index.
    w: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

fn build_normal(
    cameras: &[BaCamera],
    tracks: &[Track],
    k: &Intrinsics,
    opts: &BundleOptions,
) -> Normal {
    let nc = cameras.len();
    let mut u = vec![Matrix6::zeros(); nc];
    let mut gc = vec![Vector6::zeros(); nc];
    let mut v = vec![Matrix3::zeros(); tracks.len()];
    let mut gp = vec![Vector3::zeros(); tracks.len()];
    let mut w = Vec::with_capacity(tracks.len());
    for (ti, t) in tracks.iter().enumerate() {
        let mut wt: Vec<(usize, Matrix6x3<f64>)> = Vec::new();
        for o in &t.observations {
            let c = &cameras[o.camera];
            let Some(j) = reprojection_residual(&c.rotation, &c.center, &t.point, o, k) else {
                continue;
            };
            let wgt = huber_weight(j.residual.norm_squared(), opts.robust_delta);
            let mut jc = nalgebra::Matrix2x6::<f64>::zeros();
            if opts.optimize_rotation {
                jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&j.d_rotation);
            }
            jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&j.d_center);
            let jct = jc.transpose();
            u[o.camera] += jct * jc * wgt;
            gc[o.camera] += jct * j.residual * wgt;
            v[ti] += j.d_point.transpose() * j.d_point * wgt;
            gp[ti] += j.d_point.transpose() * j.residual * wgt;
            let blk = jct * j.d_point * wgt;
            match wt.iter_mut().find(|(ci, _)| *ci == o.camera) {
                Some((_, m)) => *m += blk,
                None => wt.push((o.camera, blk)),
            }
        }
        wt.sort_by_key(|(ci, _)| *ci);
        w.push(wt);
    }
    for (ci, c) in cameras.iter().enumerate() {
        let lg = opts.gps_weight;
        for a in 3..6 {
            u[ci][(a, a)] += lg;
        }
        let dc = c.center - c.prior_center;
        for a in 0..3 {
            gc[ci][3 + a] += lg * dc[a];
        }
        if opts.optimize_rotation {
            let (h, jh) = heading_residual(&c.rotation, c.prior_heading);
            let (tr, jt) = tilt_residual(&c.rotation);
            let hh = jh.transpose() * jh * opts.heading_weight + jt.transpose() * jt * opts.tilt_weight;
            let gh = jh.transpose() * (h * opts.heading_weight) + jt.transpose() * tr * opts.tilt_weight;
            let mut tl = u[ci].fixed_view_mut::<3, 3>(0, 0);
            tl += hh;
            let mut top = gc[ci].fixed_rows_mut::<3>(0);
            top += gh;
        } else {
            // frozen rotation: unit curvature, zero gradient => zero step
            for a in 0..3 {
                u[ci][(a, a)] = 1.0;
                gc[ci][a] = 0.0;
            }
        }
    }
    Normal { u, gc, v, gp, w }
}

struct Step {
    dc: Vec<Vector6<f64>>,
    dp: Vec<Vector3<f64>>,
    predicted: f64,
}

enum SolveError {
    Singular,
}

fn damp6(m: &Matrix6<f64>, mu: f64) -> Matrix6<f64> {
    let mut d = *m;
    for i in 0..6 {
        d[(i, i)] += mu * m[(i, i)];
    }
    d
}

fn damp3(m: &Matrix3<f64>, mu: f64) -> Matrix3<f64> {
    let mut d = *m;
    for i in 0..3 {
        d[(i, i)] += mu * m[(i, i)];
    }
    d
}

fn solve_step(n: &Normal, free: &[Option<usize>], n_free: usize, mu: f64) -> Result<Step, SolveError> {
    let dim = 6 * n_free;
    let vinv: Vec<Matrix3<f64>> = n
        .v
        .iter()
        .map(|v| damp3(v, mu).try_inverse().ok_or(SolveError::Singular))
        .collect::<Result<_, _>>()?;
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (ci, slot) in free.iter().enumerate() {
        if let Some(fi) = slot {
            s.fixed_view_mut::<6, 6>(6 * fi, 6 * fi).copy_from(&damp6(&n.u[ci], mu));
            rhs.fixed_rows_mut::<6>(6 * fi).copy_from(&(-n.gc[ci]));
        }
    }
    for (tj, wt) in n.w.iter().enumerate() {
        let vi = &vinv[tj];
        for (ci, wij) in wt {
            let Some(fi) = free[*ci] else { continue };
            let wv = wij * vi;
            let mut r = rhs.fixed_rows_mut::<6>(6 * fi);
            r += wv * n.gp[tj];
            for (ck, wkj) in wt {
                let Some(fk) = free[*ck] else { continue };
                let blk = wv * wkj.transpose();
                let mut sv = s.fixed_view_mut::<6, 6>(6 * fi, 6 * fk);
                sv -= blk;
            }
        }
    }
    let xc = if dim > 0 {
        let chol = s.cholesky().ok_or(SolveError::Singular)?;
        chol.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let mut dc = vec![Vector6::zeros(); free.len()];
    for (ci, slot) in free.iter().enumerate() {
        if let Some(fi) = slot {
            dc[ci] = xc.fixed_rows::<6>(6 * fi).into();
        }
    }
    let mut dp = Vec::with_capacity(n.v.len());
    for (tj, wt) in n.w.iter().enumerate() {
        let mut b = -n.gp[tj];
        for (ci, wij) in wt {
            if free[*ci].is_some() {
                b -= wij.transpose() * dc[*ci];
            }
        }
        dp.push(vinv[tj] * b);
    }
    if !dc.iter().all(|d| d.iter().all(|x| x.is_finite())) || !dp.iter().all(|d| d.iter().all(|x| x.is_finite())) {
        return Err(SolveError::Singular);
    }
    // ½(-Δᵀg + μ·ΔᵀDΔ), the model decrease of ½·cost
    let mut pred = 0.0;
    for (ci, slot) in free.iter().enumerate() {
        if slot.is_some() {
            let d = &dc[ci];
            pred -= d.dot(&n.gc[ci]);
            for a in 0..6 {
                pred += mu * n.u[ci][(a, a)] * d[a] * d[a];
            }
        }
    }
    for (tj, d) in dp.iter().enumerate() {
        pred -= d.dot(&n.gp[tj]);
        for a in 0..3 {
            pred += mu * n.v[tj][(a, a)] * d[a] * d[a];
        }
    }
    Ok(Step {
        dc,
        dp,
        predicted: 0.5 * pred,
    })
}

fn gradient_norm(n: &Normal, free: &[Option<usize>]) -> f64 {
    let cams = free
        .iter()
        .zip(&n.gc)
        .filter(|(f, _)| f.is_some())
        .map(|(_, g)| g.amax())
        .fold(0.0, f64::max);
    n.gp.iter().map(|g| g.amax()).fold(cams, f64::max)
}

fn apply_step(cameras: &[BaCamera], tracks: &[Track], step: &Step, opts: &BundleOptions) -> (Vec<BaCamera>, Vec<Track>) {
    let cams = cameras
        .iter()
        .zip(&step.dc)
        .map(|(c, d)| {
            if c.fixed {
                return c.clone();
            }
            let mut n = c.clone();
            if opts.optimize_rotation {
                let w = Vector3::new(d[0], d[1], d[2]);
                n.rotation = orthonormalize(&(exp_so3(&w) * c.rotation));
            }
            n.center += Vector3::new(d[3], d[4], d[5]);
            n
        })
        .collect();
    let pts = tracks
        .iter()
        .zip(&step.dp)
        .map(|(t, d)| Track {
            point: t.point + d,
            observations: t.observations.clone(),
        })
        .collect();
    (cams, pts)
}

fn validate(cameras: &[BaCamera], tracks: &[Track], opts: &BundleOptions) -> Result<(), SfmError> {
    if opts.gps_weight.is_nan() || opts.gps_weight <= 0.0 {
        return Err(SfmError::InvalidInput("gps_weight must be positive".into()));
    }
    if cameras.len() < 2 {
        return Err(SfmError::InvalidInput(format!("{} cameras, need at least 2", cameras.len())));
    }
    for (i, t) in tracks.iter().enumerate() {
        if t.observations.len() < 2 {
            return Err(SfmError::InvalidInput(format!("track {i} has fewer than 2 observations")));
        }
        if let Some(o) = t.observations.iter().find(|o| o.camera >= cameras.len()) {
            return Err(SfmError::InvalidInput(format!("track {i} references camera {}", o.camera)));
        }
    }
    Ok(())
}

/// Jointly refines rig poses and track points.
pub fn bundle_adjust(
    cameras: &[BaCamera],
    tracks: &[Track],
    intrinsics: &Intrinsics,
    opts: &BundleOptions,
) -> Result<BundleResult, SfmError> {
    validate(cameras, tracks, opts)?;
    let mut free = Vec::with_capacity(cameras.len());
    let mut n_free = 0;
    for c in cameras {
        if c.fixed {
            free.push(None);
        } else {
            free.push(Some(n_free));
            n_free += 1;
        }
    }

    let mut cams = cameras.to_vec();
    let mut pts = tracks.to_vec();
    let mut cost = total_cost(&cams, &pts, intrinsics, opts);
    if !cost.is_finite() {
        return Err(SfmError::InvalidInput("a track point lies behind an observing camera".into()));
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut mu = opts.initial_damping;
    let mut nu = 2.0;
    let mut accepted_any = false;
    let mut iterations = 0;
    let mut normal = build_normal(&cams, &pts, intrinsics, opts);
    let initial_gradient_norm = gradient_norm(&normal, &free);
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < opts.max_iters {
        if cost <= 1e-24 || gradient_norm(&normal, &free) == 0.0 {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        loop {
            let step = solve_step(&normal, &free, n_free, mu).ok();
            let outcome = step.map(|s| {
                let (nc, np) = apply_step(&cams, &pts, &s, opts);
                let new_cost = total_cost(&nc, &np, intrinsics, opts);
                (s, nc, np, new_cost)
            });
            match outcome {
                Some((s, nc, np, new_cost)) if new_cost.is_finite() && new_cost < cost => {
                    let rho = if s.predicted > 0.0 {
                        0.5 * (cost - new_cost) / s.predicted
                    } else {
                        1.0
                    };
                    mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    nu = 2.0;
                    let rel = (cost - new_cost) / cost;
                    cams = nc;
                    pts = np;
                    cost = new_cost;
                    history.push(cost);
                    accepted_any = true;
                    normal = build_normal(&cams, &pts, intrinsics, opts);
                    if rel < opts.tol {
                        termination = Termination::Converged;
                        break 'outer;
                    }
                    break;
                }
                other => {
                    let singular = other.is_none();
                    mu *= nu;
                    nu *= 2.0;
                    if mu > opts.max_damping {
                        if accepted_any {
                            termination = Termination::Stalled;
                            break 'outer;
                        }
                        return Err(if singular {
                            SfmError::RankDeficient
                        } else {
                            SfmError::Diverged { damping: mu }
                        });
                    }
                }
            }
        }
    }

    Ok(BundleResult {
        cameras: cams,
        tracks: pts,
        report: BundleReport {
            iterations,
            initial_cost,
            final_cost: cost,
            cost_history: history,
            gradient_norm: gradient_norm(&normal, &free),
            initial_gradient_norm,
            termination,
            final_damping: mu,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfm::pose::{is_rotation, rig_rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics {
            focal_px: 320.0,
            cx: 320.0,
            cy: 320.0,
        }
    }

    #[test]
    fn reprojection_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = intr();
        let mut checked = 0;
        while checked < 200 {
            let rot = exp_so3(&Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0))
                * rig_rotation(Bearing::new(rng.gen_range(0.0..360.0)));
            let c = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 2.5);
            let x = c + Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..6.0));
            let obs = Observation {
                camera: 0,
                view_index: rng.gen_range(0..8),
                pixel: PixelCoord::new(300.0, 310.0),
            };
            let Some(j) = reprojection_residual(&rot, &c, &x, &obs, &k) else { continue };
            let p = view_rotation(45.0 * f64::from(obs.view_index)) * rot * (x - c);
            if p.z < 2.0 {
                continue;
            }
            let h = 1e-6;
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                let rp = reprojection_residual(&(exp_so3(&e) * rot), &c, &x, &obs, &k).unwrap().residual;
                let rm = reprojection_residual(&(exp_so3(&-e) * rot), &c, &x, &obs, &k).unwrap().residual;
                let fd_rot = (rp - rm) / (2.0 * h);
                let cp = reprojection_residual(&rot, &(c + e), &x, &obs, &k).unwrap().residual;
                let cm = reprojection_residual(&rot, &(c - e), &x, &obs, &k).unwrap().residual;
                let fd_c = (cp - cm) / (2.0 * h);
                let xp = reprojection_residual(&rot, &c, &(x + e), &obs, &k).unwrap().residual;
                let xm = reprojection_residual(&rot, &c, &(x - e), &obs, &k).unwrap().residual;
                let fd_x = (xp - xm) / (2.0 * h);
                for (an, fd) in [(j.d_rotation.column(a), fd_rot), (j.d_center.column(a), fd_c), (j.d_point.column(a), fd_x)] {
                    let scale = an.amax().max(fd.amax()).max(1e-2);
                    assert!((an - fd).amax() / scale < 1e-4, "{an} vs {fd}");
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn prior_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let rot = exp_so3(&Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)))
                * rig_rotation(Bearing::new(rng.gen_range(0.0..360.0)));
            let prior = Bearing::new(heading_of(&rot).degrees() + rng.gen_range(-20.0..20.0));
            let (_, jh) = heading_residual(&rot, prior);
            let (_, jt) = tilt_residual(&rot);
            let h = 1e-6;
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                let rp = exp_so3(&e) * rot;
                let rm = exp_so3(&-e) * rot;
                let fd_h = (heading_residual(&rp, prior).0 - heading_residual(&rm, prior).0) / (2.0 * h);
                let scale = jh[a].abs().max(fd_h.abs()).max(1e-2);
                assert!((jh[a] - fd_h).abs() / scale < 1e-4);
                let fd_t = (tilt_residual(&rp).0 - tilt_residual(&rm).0) / (2.0 * h);
                let an = jt.column(a);
                let scale = an.amax().max(fd_t.amax()).max(1e-2);
                assert!((an - fd_t).amax() / scale < 1e-4);
            }
        }
    }

    fn small_scene(seed: u64) -> (Vec<BaCamera>, Vec<Track>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cams: Vec<BaCamera> = (0..4)
            .map(|i| {
                let c = Vector3::new(8.0 * f64::from(i), 0.0, 2.5);
                let h = Bearing::new(0.0);
                BaCamera {
                    rotation: rig_rotation(h),
                    center: c,
                    prior_center: c,
                    prior_heading: h,
                    fixed: false,
                }
            })
            .collect();
        let k = intr();
        let mut tracks = Vec::new();
        while tracks.len() < 30 {
            let x = Vector3::new(rng.gen_range(-5.0..30.0), rng.gen_range(8.0..20.0), rng.gen_range(0.0..8.0));
            let mut obs = Vec::new();
            for (ci, c) in cams.iter().enumerate() {
                let o = Observation {
                    camera: ci,
                    view_index: 0,
                    pixel: PixelCoord::new(0.0, 0.0),
                };
                if let Some(j) = reprojection_residual(&c.rotation, &c.center, &x, &o, &k) {
                    let px = PixelCoord::new(j.residual.x, j.residual.y);
                    if (0.0..640.0).contains(&px.u) && (0.0..640.0).contains(&px.v) {
                        obs.push(Observation { pixel: px, ..o });
                    }
                }
            }
            if obs.len() >= 2 {
                tracks.push(Track { point: x, observations: obs });
            }
        }
        (cams, tracks)
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let (cams, tracks) = small_scene(1);
        let res = bundle_adjust(&cams, &tracks, &intr(), &BundleOptions::default()).unwrap();
        assert!(res.report.initial_cost < 1e-18);
        for (a, b) in res.cameras.iter().zip(&cams) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.rotation, b.rotation);
        }
    }

    #[test]
    fn perturbed_scene_converges_monotonically() {
        let (cams, tracks) = small_scene(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut noisy = cams.clone();
        for c in noisy.iter_mut() {
            c.center += Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0);
            c.rotation = exp_so3(&Vector3::new(0.0, rng.gen_range(-0.03..0.03), 0.0)) * c.rotation;
            c.prior_center = c.center;
            c.prior_heading = heading_of(&c.rotation);
        }
        let mut pts = tracks.clone();
        for t in pts.iter_mut() {
            t.point += Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
        }
        let res = bundle_adjust(&noisy, &pts, &intr(), &BundleOptions::default()).unwrap();
        for w in res.report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        // the noisy priors keep a residual cost; the reprojection part vanishes
        assert!(res.report.final_cost < 1e-2 * res.report.initial_cost);
        assert!(res.report.gradient_norm < 1e-6 * res.report.initial_gradient_norm.max(1.0));
        for c in &res.cameras {
            assert!(is_rotation(&c.rotation, 1e-9));
        }
    }

    #[test]
    fn huge_gps_weight_pins_centres() {
        let (cams, tracks) = small_scene(4);
        let mut noisy = cams.clone();
        for (i, c) in noisy.iter_mut().enumerate() {
            c.prior_center += Vector3::new(0.3 * i as f64, -0.2, 0.0);
        }
        let opts = BundleOptions {
            gps_weight: 1e12,
            ..BundleOptions::default()
        };
        let res = bundle_adjust(&noisy, &tracks, &intr(), &opts).unwrap();
        for c in &res.cameras {
            let dev = (c.center - c.prior_center).norm() / c.prior_center.norm().max(1.0);
            assert!(dev < 1e-6, "{dev}");
        }
    }

    #[test]
    fn frozen_rotation_is_bit_identical() {
        let (cams, tracks) = small_scene(6);
        let mut noisy = cams.clone();
        noisy[1].center.x += 0.7;
        noisy[1].prior_center = noisy[1].center;
        let opts = BundleOptions {
            optimize_rotation: false,
            ..BundleOptions::default()
        };
        let res = bundle_adjust(&noisy, &tracks, &intr(), &opts).unwrap();
        for (a, b) in res.cameras.iter().zip(&noisy) {
            assert_eq!(a.rotation, b.rotation);
        }
        assert!(res.report.final_cost < res.report.initial_cost);
    }

    #[test]
    fn fixed_camera_does_not_move() {
        let (cams, tracks) = small_scene(8);
        let mut noisy = cams.clone();
        noisy[0].fixed = true;
        noisy[2].center.y += 0.5;
        let res = bundle_adjust(&noisy, &tracks, &intr(), &BundleOptions::default()).unwrap();
        assert_eq!(res.cameras[0], noisy[0]);
    }

    #[test]
    fn zero_focal_is_rank_deficient() {
        let (cams, tracks) = small_scene(9);
        let mut k = intr();
        k.focal_px = 0.0;
        let mut noisy = cams.clone();
        noisy[1].center.x += 1.0;
        assert_eq!(
            bundle_adjust(&noisy, &tracks, &k, &BundleOptions::default()),
            Err(SfmError::RankDeficient)
        );
    }

    #[test]
    fn input_validation() {
        let (cams, mut tracks) = small_scene(10);
        let opts = BundleOptions {
            gps_weight: 0.0,
            ..BundleOptions::default()
        };
        assert!(matches!(bundle_adjust(&cams, &tracks, &intr(), &opts), Err(SfmError::InvalidInput(_))));
        tracks[0].observations.truncate(1);
        assert!(matches!(
            bundle_adjust(&cams, &tracks, &intr(), &BundleOptions::default()),
            Err(SfmError::InvalidInput(_))
        ));
    }
}
