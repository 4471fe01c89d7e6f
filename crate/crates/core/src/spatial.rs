use std::num::NonZero;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::Vector3;

/// Static nearest-neighbour index over 3D points.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, u64, 3, 32>,
    len: usize,
}

impl PointIndex {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self {
            tree: ImmutableKdTree::new_from_slice(&raw),
            len: points.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// (index, squared distance) of the closest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.len == 0 {
            return None;
        }
        let n = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
        Some((n.item as usize, n.distance))
    }

    /// Up to `k` closest points, nearest first.
    pub fn nearest_k(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let Some(k) = NonZero::new(k.min(self.len)) else {
            return Vec::new();
        };
        self.tree
            .nearest_n::<SquaredEuclidean>(&[q.x, q.y, q.z], k)
            .into_iter()
            .map(|n| (n.item as usize, n.distance))
            .collect()
    }

    /// Indices within `radius`, sorted by index.
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        let mut out: Vec<usize> = self
            .tree
            .within_unsorted::<SquaredEuclidean>(&[q.x, q.y, q.z], radius * radius)
            .into_iter()
            .map(|n| n.item as usize)
            .collect();
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let idx = PointIndex::new(&pts);
        for _ in 0..50 {
            let q = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let best = pts
                .iter()
                .map(|p| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min);
            let (i, d) = idx.nearest(&q).unwrap();
            assert!((d - best).abs() < 1e-12);
            assert!(((pts[i] - q).norm_squared() - best).abs() < 1e-12);
            let brute: Vec<usize> = (0..pts.len()).filter(|&i| (pts[i] - q).norm() <= 0.1).collect();
            assert_eq!(idx.within(&q, 0.1), brute);
            let k = idx.nearest_k(&q, 5);
            assert_eq!(k.len(), 5);
            assert!(k.windows(2).all(|w| w[0].1 <= w[1].1));
        }
        assert!(PointIndex::new(&[]).nearest(&Vector3::zeros()).is_none());
    }
}
