//! Point-to-plane similarity ICP from several yaw hypotheses.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, SymmetricEigen, Unit, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pose::PlacementPose;
use crate::error::{Error, Result};
use crate::scene::Aabb;
use crate::spatial::PointIndex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    /// Yaw hypotheses about the up axis.
    pub candidate_yaws: usize,
    /// Also try every yaw upside down.
    pub flip: bool,
    pub max_iterations: usize,
    /// Pairs farther apart than this fraction of the anchor's bbox diagonal
    /// are ignored.
    pub cutoff: f64,
    /// Stop when the RMS residual changes by less than this relative amount.
    pub tolerance: f64,
    /// Neighbours used to estimate the normals for point-to-plane pairs.
    pub normal_neighbors: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            candidate_yaws: 12,
            flip: true,
            max_iterations: 60,
            cutoff: 0.25,
            tolerance: 1e-10,
            normal_neighbors: 12,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_yaws == 0 || self.max_iterations == 0 || self.normal_neighbors < 3 {
            return Err(Error::Config(
                "icp: candidate_yaws and max_iterations must be positive, normal_neighbors at least 3".into(),
            ));
        }
        if !(self.cutoff > 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::Config("icp: cutoff must be positive and tolerance non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpCandidate {
    pub pose: PlacementPose,
    /// RMS distance over the final correspondences.
    pub residual: f64,
    pub yaw_deg: f64,
    pub flipped: bool,
}

/// Closed-form similarity (scale, R, t) minimising Σ |s R x + t − y|².
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<(f64, Matrix3<f64>, Vector3<f64>)> {
    let n = src.len();
    if n < 3 || n != dst.len() {
        return None;
    }
    let inv = 1.0 / n as f64;
    let mx = src.iter().sum::<Vector3<f64>>() * inv;
    let my = dst.iter().sum::<Vector3<f64>>() * inv;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (x, y) in src.iter().zip(dst) {
        let dx = x - mx;
        cov += (y - my) * dx.transpose();
        var += dx.norm_squared();
    }
    cov *= inv;
    var *= inv;
    if !(var > 1e-300) {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let s = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var;
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    Some((s, r, my - r * mx * s))
}

fn rms_radius(points: &[Vector3<f64>], c: &Vector3<f64>) -> f64 {
    (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / points.len() as f64).sqrt()
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn degenerate(points: &[Vector3<f64>]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let ev = cov.symmetric_eigenvalues();
    let max = ev.amax();
    // all points on one line (or one point)
    !(max > 0.0) || ev.iter().filter(|&&e| e > 1e-12 * max).count() < 2
}

/// Run similarity ICP from every yaw (and optionally flipped) hypothesis.
///
/// `asset` is in the asset's canonical frame with +y up; `anchor` is the
/// object as observed in the scene. Each hypothesis starts from the
/// centroid offset and the ratio of bbox diagonals.
pub fn icp_candidates(
    asset: &[Vector3<f64>],
    anchor: &[Vector3<f64>],
    up: &Vector3<f64>,
    cfg: &IcpConfig,
) -> Result<Vec<IcpCandidate>> {
    cfg.validate()?;
    if degenerate(asset) || degenerate(anchor) {
        return Err(Error::Geometry("icp: point cloud is degenerate".into()));
    }
    let up = Unit::new_normalize(*up);
    let to_world = Rotation3::rotation_between(&Vector3::y(), &up)
        .unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI))
        .into_inner();
    let anchor_box = Aabb::from_points(anchor);
    let (ca, cb) = (centroid(asset), centroid(anchor));
    // ratio of RMS radii: unlike a bbox ratio it does not change with yaw
    let s0 = rms_radius(anchor, &cb) / rms_radius(asset, &ca);
    let cutoff = cfg.cutoff * anchor_box.diagonal();
    let anchor_index = PointIndex::new(anchor);
    let anchor_normals = local_normals(anchor, &anchor_index, cfg.normal_neighbors);
    let asset_normals = local_normals(asset, &PointIndex::new(asset), cfg.normal_neighbors);

    let mut starts = Vec::new();
    for flip in [false, true] {
        if flip && !cfg.flip {
            continue;
        }
        for k in 0..cfg.candidate_yaws {
            let yaw = 360.0 * k as f64 / cfg.candidate_yaws as f64;
            let mut r = Rotation3::from_axis_angle(&up, yaw.to_radians()).into_inner() * to_world;
            if flip {
                r *= Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI).into_inner();
            }
            starts.push((yaw, flip, r));
        }
    }
    let results: Vec<Option<IcpCandidate>> = starts
        .par_iter()
        .map(|&(yaw, flipped, r0)| {
            let t0 = cb - r0 * ca * s0;
            run_icp(asset, &asset_normals, anchor, &anchor_index, &anchor_normals, (s0, r0, t0), cutoff, cfg).map(|(pose, residual)| IcpCandidate {
                pose,
                residual,
                yaw_deg: yaw,
                flipped,
            })
        })
        .collect();
    let out: Vec<IcpCandidate> = results.into_iter().flatten().collect();
    if out.is_empty() {
        return Err(Error::Geometry("icp: no hypothesis kept enough correspondences".into()));
    }
    Ok(out)
}

/// Unsigned surface normals from the `k` nearest neighbours.
fn local_normals(points: &[Vector3<f64>], index: &PointIndex, k: usize) -> Vec<Vector3<f64>> {
    points
        .iter()
        .map(|p| {
            let nb = index.nearest_k(p, k);
            let c = nb.iter().map(|&(i, _)| points[i]).sum::<Vector3<f64>>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for &(i, _) in &nb {
                let d = points[i] - c;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            eig.eigenvectors.column(eig.eigenvalues.imin()).normalize()
        })
        .collect()
}

/// One point-to-plane pair: moved asset point, target point, target normal.
struct Pair {
    p: Vector3<f64>,
    q: Vector3<f64>,
    n: Vector3<f64>,
}

/// Gauss–Newton step for rotation ω, log-scale δ and shift dt about `c`,
/// minimising Σ ((c + e^δ R(ω)(p − c) + dt − q) · n)². `rigid` holds δ at 0.
fn plane_step(pairs: &[Pair], c: &Vector3<f64>, rigid: bool) -> Option<SVector<f64, 7>> {
    let mut jtj = SMatrix::<f64, 7, 7>::zeros();
    let mut jtr = SVector::<f64, 7>::zeros();
    for pr in pairs {
        let d = pr.p - c;
        let r = (pr.p - pr.q).dot(&pr.n);
        let w = d.cross(&pr.n);
        let row = SVector::<f64, 7>::from_column_slice(&[
            w.x,
            w.y,
            w.z,
            pr.n.x,
            pr.n.y,
            pr.n.z,
            if rigid { 0.0 } else { d.dot(&pr.n) },
        ]);
        jtj += row * row.transpose();
        jtr += row * r;
    }
    // light damping keeps directions the surfaces do not constrain in place
    let damp = 1e-9 * jtj.trace().max(1e-300);
    for i in 0..7 {
        jtj[(i, i)] += damp;
    }
    if rigid {
        jtj[(6, 6)] = 1.0;
    }
    jtj.cholesky().map(|ch| -ch.solve(&jtr))
}

fn run_icp(
    asset: &[Vector3<f64>],
    asset_normals: &[Vector3<f64>],
    anchor: &[Vector3<f64>],
    anchor_index: &PointIndex,
    anchor_normals: &[Vector3<f64>],
    init: (f64, Matrix3<f64>, Vector3<f64>),
    cutoff: f64,
    cfg: &IcpConfig,
) -> Option<(PlacementPose, f64)> {
    let (mut s, mut r, mut t) = init;
    let mut last = f64::INFINITY;
    // Rigid at the initial scale first: with scale free from the start, a
    // rotated start settles on an inflated, still-rotated fit.
    let mut rigid = true;
    let mut rigid_iters = 0;
    for _ in 0..cfg.max_iterations {
        let moved: Vec<Vector3<f64>> = asset.iter().map(|p| r * p * s + t).collect();
        let moved_index = PointIndex::new(&moved);
        let mut pairs = Vec::with_capacity(asset.len() + anchor.len());
        // both directions, so neither cloud can hide part of itself
        for p in &moved {
            if let Some((j, d2)) = anchor_index.nearest(p) {
                if d2.sqrt() <= cutoff {
                    pairs.push(Pair { p: *p, q: anchor[j], n: anchor_normals[j] });
                }
            }
        }
        for q in anchor {
            if let Some((i, d2)) = moved_index.nearest(q) {
                if d2.sqrt() <= cutoff {
                    pairs.push(Pair { p: moved[i], q: *q, n: r * asset_normals[i] });
                }
            }
        }
        if pairs.len() < 7 {
            return None;
        }
        let residual = (pairs.iter().map(|pr| (pr.p - pr.q).dot(&pr.n).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt();
        let c = pairs.iter().map(|pr| pr.p).sum::<Vector3<f64>>() / pairs.len() as f64;
        let x = plane_step(&pairs, &c, rigid)?;
        let rot = Rotation3::new(Vector3::new(x[0], x[1], x[2])).into_inner();
        let grow = x[6].exp();
        r = rot * r;
        s *= grow;
        t = c + rot * (t - c) * grow + Vector3::new(x[3], x[4], x[5]);
        if rigid {
            rigid_iters += 1;
        }
        let settled = (last - residual).abs() <= cfg.tolerance * last.max(1e-300) || residual < 1e-12;
        last = residual;
        if rigid && (settled || rigid_iters >= cfg.max_iterations / 2) {
            rigid = false;
            last = f64::INFINITY;
        } else if settled {
            break;
        }
    }
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    // RMS point-to-point distance of the returned pose, comparable across starts
    let moved: Vec<Vector3<f64>> = asset.iter().map(|p| r * p * s + t).collect();
    let moved_index = PointIndex::new(&moved);
    let (mut sq, mut n) = (0.0, 0usize);
    for p in &moved {
        if let Some((_, d2)) = anchor_index.nearest(p) {
            if d2.sqrt() <= cutoff {
                sq += d2;
                n += 1;
            }
        }
    }
    for q in anchor {
        if let Some((_, d2)) = moved_index.nearest(q) {
            if d2.sqrt() <= cutoff {
                sq += d2;
                n += 1;
            }
        }
    }
    if n < 3 {
        return None;
    }
    Some((PlacementPose::new(&r, t, s), (sq / n as f64).sqrt()))
}

/// Candidate with the smallest residual; ties go to the earliest.
pub fn best_by_residual(candidates: &[IcpCandidate]) -> Option<&IcpCandidate> {
    candidates
        .iter()
        .reduce(|a, b| if b.residual < a.residual { b } else { a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assemble::pose::rotation_angle_deg;
    use crate::collision::box_mesh;

    fn l_shape() -> Vec<Vector3<f64>> {
        // two boxes of different size: no rotational symmetry
        let mut m = box_mesh(Vector3::new(-0.5, -0.2, -0.15), Vector3::new(0.5, 0.2, 0.15)).sample_surface(800, 3);
        m.extend(box_mesh(Vector3::new(0.2, 0.2, -0.15), Vector3::new(0.5, 0.45, 0.15)).sample_surface(300, 4));
        m
    }

    #[test]
    fn umeyama_recovers_a_similarity() {
        let src = l_shape();
        let r = Rotation3::from_euler_angles(0.2, 0.9, -0.4).into_inner();
        let t = Vector3::new(0.3, -1.0, 2.0);
        let dst: Vec<_> = src.iter().map(|p| r * p * 1.7 + t).collect();
        let (s, r1, t1) = umeyama(&src, &dst).unwrap();
        assert!((s - 1.7).abs() < 1e-12);
        assert!((r1 - r).amax() < 1e-12);
        assert!((t1 - t).amax() < 1e-12);
    }

    #[test]
    fn identical_clouds_give_identity() {
        let pts = l_shape();
        let c = icp_candidates(&pts, &pts, &Vector3::y(), &IcpConfig::default()).unwrap();
        assert_eq!(c.len(), 24);
        let id = c.iter().find(|c| c.yaw_deg == 0.0 && !c.flipped).unwrap();
        assert!(id.residual <= 1e-8, "{}", id.residual);
        assert!((id.pose.rotation().unwrap() - Matrix3::identity()).amax() < 1e-8);
        assert!((id.pose.scale - 1.0).abs() < 1e-8);
    }

    #[test]
    fn recovers_quarter_turn_and_shift() {
        let pts = l_shape();
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), 90f64.to_radians()).into_inner();
        let anchor: Vec<_> = pts.iter().map(|p| r * p + Vector3::new(1.0, 0.0, 0.0)).collect();
        let c = icp_candidates(&pts, &anchor, &Vector3::y(), &IcpConfig::default()).unwrap();
        let best = best_by_residual(&c).unwrap();
        let bbox = Aabb::from_points(&anchor).diagonal();
        assert!(rotation_angle_deg(&best.pose.rotation().unwrap(), &r) <= 1.0);
        assert!((best.pose.t() - Vector3::new(1.0, 0.0, 0.0)).norm() <= 0.01 * bbox);
    }

    #[test]
    fn converges_from_half_a_candidate_spacing_away() {
        // 15° lies midway between two 30° starts
        let pts = l_shape();
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), 15f64.to_radians()).into_inner();
        let anchor: Vec<_> = pts.iter().map(|p| r * p * 1.3 + Vector3::new(0.2, 0.1, -0.3)).collect();
        let c = icp_candidates(&pts, &anchor, &Vector3::y(), &IcpConfig::default()).unwrap();
        let best = best_by_residual(&c).unwrap();
        let err = rotation_angle_deg(&best.pose.rotation().unwrap(), &r);
        assert!(err <= 1.0, "{err}");
        assert!((best.pose.scale - 1.3).abs() <= 1e-2, "{}", best.pose.scale);
    }

    #[test]
    fn recovers_double_scale() {
        let pts = l_shape();
        let anchor: Vec<_> = pts.iter().map(|p| p * 2.0).collect();
        let c = icp_candidates(&pts, &anchor, &Vector3::y(), &IcpConfig::default()).unwrap();
        let best = best_by_residual(&c).unwrap();
        assert!((best.pose.scale - 2.0).abs() <= 0.02 * 2.0, "{}", best.pose.scale);
    }

    #[test]
    fn collinear_clouds_are_rejected() {
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            icp_candidates(&line, &l_shape(), &Vector3::y(), &IcpConfig::default()),
            Err(Error::Geometry(_))
        ));
    }
}
