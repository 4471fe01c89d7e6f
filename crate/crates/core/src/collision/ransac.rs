use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::points::smallest_axis;
use super::{FaceClass, Plane};
use crate::error::{Error, Result};
use crate::scene::Aabb;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Inlier distance; `None` uses `relative_threshold` × bounds diagonal.
    pub distance_threshold: Option<f64>,
    pub relative_threshold: f64,
    pub iterations: usize,
    /// Stop once the best plane holds less than this share of the points
    /// that are still unexplained.
    pub min_inlier_fraction: f64,
    /// ...and at least this share of all input points, so the few noise
    /// points left after the last real surface cannot pass as a plane.
    pub min_support_fraction: f64,
    pub max_planes: usize,
    pub up: [f64; 3],
    pub seed: u64,
    /// Points within this many thresholds of an accepted plane are retired
    /// with it, so the noise tails of one surface cannot form a second plane.
    pub exclusion_factor: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            distance_threshold: None,
            relative_threshold: 0.005,
            iterations: 1000,
            min_inlier_fraction: 0.15,
            min_support_fraction: 0.01,
            max_planes: 12,
            up: [0.0, 1.0, 0.0],
            seed: 0,
            exclusion_factor: 2.0,
        }
    }
}

impl RansacConfig {
    pub fn threshold_for(&self, points: &[Vector3<f64>]) -> f64 {
        self.distance_threshold
            .unwrap_or_else(|| self.relative_threshold * Aabb::from_points(points).diagonal())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneHypothesis {
    pub plane: Plane,
    pub inliers: Vec<usize>,
    pub class: FaceClass,
}

/// Floor or ceiling when nearly perpendicular to `up` (within 15°), wall when
/// nearly parallel (within 15°), free otherwise. Floors lie below `reference`.
pub fn classify_plane(plane: &Plane, up: &Vector3<f64>, reference: &Vector3<f64>) -> FaceClass {
    let up = up.normalize();
    let c = plane.normal.dot(&up).abs();
    if c >= 15f64.to_radians().cos() {
        let foot = plane.project(reference);
        if (foot - reference).dot(&up) < 0.0 {
            FaceClass::Floor
        } else {
            FaceClass::Ceiling
        }
    } else if c <= 75f64.to_radians().cos() {
        FaceClass::Wall
    } else {
        FaceClass::Free
    }
}

fn hypothesis_rng(seed: u64, round: usize, h: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((round as u64) << 32) | h as u64);
    rng
}

fn fit(points: &[Vector3<f64>], idx: &[usize]) -> Option<Plane> {
    if idx.len() < 3 {
        return None;
    }
    let mean = idx.iter().fold(Vector3::zeros(), |a, &i| a + points[i]) / idx.len() as f64;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    Some(Plane::through(&mean, &smallest_axis(&cov)))
}

fn inliers_of(points: &[Vector3<f64>], remaining: &[usize], plane: &Plane, thr: f64) -> Vec<usize> {
    remaining
        .iter()
        .copied()
        .filter(|&i| plane.signed_distance(&points[i]).abs() <= thr)
        .collect()
}

/// Greedy sequential RANSAC: find the best-supported plane among the points
/// not yet explained, refine it by least squares, retire its points, repeat.
/// Normals are oriented towards the centroid of the input.
pub fn detect_planes(points: &[Vector3<f64>], cfg: &RansacConfig) -> Result<Vec<PlaneHypothesis>> {
    if points.len() < 3 {
        return Err(Error::Geometry(format!("need at least 3 points, got {}", points.len())));
    }
    if !(cfg.min_inlier_fraction > 0.0 && cfg.min_inlier_fraction <= 1.0)
        || !(0.0..=1.0).contains(&cfg.min_support_fraction)
        || cfg.iterations == 0
    {
        return Err(Error::Config("ransac needs iterations and a min inlier fraction in (0, 1]".into()));
    }
    let thr = cfg.threshold_for(points);
    if !(thr > 0.0) {
        return Err(Error::Geometry("points are coincident".into()));
    }
    let up = Vector3::from(cfg.up);
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64;
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    let mut found = Vec::new();

    for round in 0..cfg.max_planes {
        if remaining.len() < 3 {
            break;
        }
        let best = (0..cfg.iterations)
            .into_par_iter()
            .filter_map(|h| {
                let mut rng = hypothesis_rng(cfg.seed, round, h);
                let n = remaining.len();
                let a = rng.gen_range(0..n);
                let mut b = rng.gen_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                let c = rng.gen_range(0..n);
                let (pa, pb, pc) = (points[remaining[a]], points[remaining[b]], points[remaining[c]]);
                let normal = (pb - pa).cross(&(pc - pa));
                if normal.norm() <= 1e-12 * thr * thr {
                    return None;
                }
                let plane = Plane::through(&pa, &normal);
                let count = remaining
                    .iter()
                    .filter(|&&i| plane.signed_distance(&points[i]).abs() <= thr)
                    .count();
                Some((count, h, plane))
            })
            .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)));
        let Some((_, _, mut plane)) = best else {
            break;
        };
        let mut inliers = inliers_of(points, &remaining, &plane, thr);
        for _ in 0..3 {
            let Some(refit) = fit(points, &inliers) else { break };
            let next = inliers_of(points, &remaining, &refit, thr);
            if next.len() < inliers.len() {
                break;
            }
            plane = refit;
            inliers = next;
        }
        let support = inliers.len() as f64;
        if support < cfg.min_inlier_fraction * remaining.len() as f64
            || support < cfg.min_support_fraction * points.len() as f64
            || inliers.len() < 3
        {
            break;
        }
        if plane.signed_distance(&centroid) < 0.0 {
            plane = plane.flipped();
        }
        let class = classify_plane(&plane, &up, &centroid);
        let band = cfg.exclusion_factor.max(1.0) * thr;
        remaining.retain(|&i| plane.signed_distance(&points[i]).abs() > band);
        found.push(PlaneHypothesis { plane, inliers, class });
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exact_plane_is_floor() {
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|i| Vector3::new((i % 20) as f64 * 0.1, (i / 20) as f64 * 0.1, 0.0))
            .chain([Vector3::new(1.0, 1.0, 1.0)])
            .collect();
        let cfg = RansacConfig {
            up: [0.0, 0.0, 1.0],
            ..Default::default()
        };
        let planes = detect_planes(&pts, &cfg).unwrap();
        assert_eq!(planes.len(), 1);
        assert!((planes[0].plane.normal.z.abs() - 1.0).abs() < 1e-9);
        assert_eq!(planes[0].class, FaceClass::Floor);
    }

    #[test]
    fn noise_ball_has_no_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Vector3<f64>> = (0..3000)
            .map(|_| Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)))
            .collect();
        assert!(detect_planes(&pts, &RansacConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn noise_tails_of_a_box_form_no_extra_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = Normal::new(0.0, 0.02).unwrap();
        let pts: Vec<Vector3<f64>> = crate::collision::box_mesh(Vector3::new(-2.0, 0.0, -2.0), Vector3::new(2.0, 3.0, 2.0))
            .sample_surface(6000, 1)
            .into_iter()
            .map(|p| p + Vector3::from_fn(|_, _| n.sample(&mut rng)))
            .collect();
        let planes = detect_planes(&pts, &RansacConfig::default()).unwrap();
        assert_eq!(planes.len(), 6);
        let floors = planes.iter().filter(|p| p.class == FaceClass::Floor).count();
        let walls = planes.iter().filter(|p| p.class == FaceClass::Wall).count();
        assert_eq!((floors, walls), (1, 4));
    }

    #[test]
    fn classification_rules() {
        let up = Vector3::y();
        let c = Vector3::new(0.0, 1.5, 0.0);
        assert_eq!(classify_plane(&Plane::new(up, 0.0), &up, &c), FaceClass::Floor);
        assert_eq!(classify_plane(&Plane::new(-up, -3.0), &up, &c), FaceClass::Ceiling);
        assert_eq!(classify_plane(&Plane::new(Vector3::x(), -2.0), &up, &c), FaceClass::Wall);
        let tilted = Vector3::new(1.0, 1.0, 0.0);
        assert_eq!(classify_plane(&Plane::new(tilted, 0.0), &up, &c), FaceClass::Free);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            detect_planes(&[Vector3::zeros(), Vector3::x()], &RansacConfig::default()),
            Err(Error::Geometry(_))
        ));
    }
}
