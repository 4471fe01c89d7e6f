use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::GaussianScene;
use crate::spatial::PointIndex;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrientedPoints {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl OrientedPoints {
    pub fn new(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::Argument(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        Ok(Self { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// How estimated normals are given a sign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Towards the nearest of these viewpoints (e.g. camera centres).
    Viewpoints(Vec<[f64; 3]>),
    /// Towards the centre of the scene bounds (enclosing rooms).
    Inward,
    /// Away from the centre of the scene bounds (compact objects).
    Outward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub seed: u64,
    /// Neighbouring centres used for the local normal fit.
    pub neighbors: usize,
    /// 0 samples Gaussian centres exactly; 1 draws from each Gaussian.
    pub spread: f64,
    pub orientation: Orientation,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            neighbors: 16,
            spread: 1.0,
            orientation: Orientation::Inward,
        }
    }
}

/// Draw `n` points from the Gaussians with probability proportional to
/// opacity; normals are the least-variance direction of neighbouring centres.
pub fn sample_points(scene: &GaussianScene, n: usize, cfg: &SamplingConfig) -> Result<OrientedPoints> {
    if scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    if n == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    let prims = scene.primitives();
    let weights: Vec<f64> = prims.iter().map(|p| p.opacity()).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::Data(format!("cannot sample by opacity: {e}")))?;
    let centers = scene.centers();
    let index = PointIndex::new(&centers);
    let middle = scene.bbox().center();
    let viewpoints: Vec<Vector3<f64>> = match &cfg.orientation {
        Orientation::Viewpoints(v) => v.iter().map(|p| Vector3::from(*p)).collect(),
        _ => Vec::new(),
    };

    let mut normal_cache: HashMap<usize, Vector3<f64>> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let i = dist.sample(&mut rng);
        let p = &prims[i];
        let mut x = centers[i];
        if cfg.spread > 0.0 {
            let z = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let l: Matrix3<f64> = p.rotation().to_rotation_matrix().into_inner() * Matrix3::from_diagonal(&p.scale());
            x += l * z * cfg.spread;
        }
        let nrm = *normal_cache.entry(i).or_insert_with(|| {
            let near: Vec<usize> = index
                .nearest_k(&centers[i], cfg.neighbors.max(1))
                .into_iter()
                .map(|(j, _)| j)
                .collect();
            let raw = if near.len() >= 3 {
                least_variance_direction(near.iter().map(|&j| &centers[j]))
            } else {
                smallest_axis(&p.covariance())
            };
            let toward = match &cfg.orientation {
                Orientation::Viewpoints(_) if !viewpoints.is_empty() => {
                    let c = &centers[i];
                    let v = viewpoints
                        .iter()
                        .min_by(|a, b| (*a - c).norm_squared().total_cmp(&(*b - c).norm_squared()))
                        .expect("nonempty");
                    v - c
                }
                Orientation::Outward => centers[i] - middle,
                _ => middle - centers[i],
            };
            if raw.dot(&toward) < 0.0 {
                -raw
            } else {
                raw
            }
        });
        points.push(x);
        normals.push(nrm);
    }
    Ok(OrientedPoints { points, normals })
}

fn least_variance_direction<'a>(pts: impl Iterator<Item = &'a Vector3<f64>> + Clone) -> Vector3<f64> {
    let n = pts.clone().count() as f64;
    let mean = pts.clone().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    smallest_axis(&cov)
}

pub(crate) fn smallest_axis(cov: &Matrix3<f64>) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let k = eig.eigenvalues.imin();
    eig.eigenvectors.column(k).normalize()
}
