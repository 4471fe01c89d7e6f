use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CollisionMesh, OrientedPoints};
use crate::error::{Error, Result};
use crate::scene::Aabb;
use crate::spatial::PointIndex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceConfig {
    /// Grid cells along the longest side of the point bounds.
    pub resolution: usize,
    /// Empty cells added around the bounds on every side.
    pub padding_cells: usize,
    /// Points blended into each grid sample.
    pub neighbors: usize,
    /// Blend kernel width in cells.
    pub kernel_cells: f64,
    /// Passes of neighbour averaging applied to the field.
    pub smoothing_passes: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            resolution: 48,
            padding_cells: 2,
            neighbors: 8,
            kernel_cells: 1.5,
            smoothing_passes: 1,
        }
    }
}

struct Grid {
    origin: Vector3<f64>,
    h: f64,
    dims: [usize; 3],
    values: Vec<f64>,
}

impl Grid {
    fn id(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    fn coords(&self, id: usize) -> [usize; 3] {
        let i = id % self.dims[0];
        let j = (id / self.dims[0]) % self.dims[1];
        let k = id / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    fn position(&self, id: usize) -> Vector3<f64> {
        let [i, j, k] = self.coords(id);
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.h
    }
}

/// Oriented points to a closed triangle mesh.
///
/// A signed field is sampled on a regular grid: at every node, the offsets
/// along the normals of nearby points are blended with a Gaussian kernel.
/// Free space (the side the normals face) is positive. The outermost grid
/// layer is forced positive so the zero set is always closed, and the
/// surface is extracted with marching tetrahedra on a conforming
/// six-tetrahedra-per-cube split, which makes the result watertight by
/// construction. An enclosing room therefore yields two shells: the inner
/// room surface and the outer face of the padding.
pub fn reconstruct_surface(points: &OrientedPoints, cfg: &SurfaceConfig) -> Result<CollisionMesh> {
    if points.len() < 4 {
        return Err(Error::Geometry(format!("need at least 4 points, got {}", points.len())));
    }
    if points.normals.len() != points.len() {
        return Err(Error::Argument("points and normals differ in length".into()));
    }
    if cfg.resolution < 2 {
        return Err(Error::Config("surface resolution must be at least 2".into()));
    }
    let bbox = Aabb::from_points(&points.points);
    let scale = bbox.diagonal();
    let mean = points.points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &points.points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / points.len() as f64);
    if !(scale > 0.0) || eig.eigenvalues.min() <= 1e-10 * scale * scale {
        return Err(Error::Geometry("points are coplanar or coincident".into()));
    }

    let h = bbox.extent().max() / cfg.resolution as f64;
    let pad = cfg.padding_cells.max(1) as f64 + 0.5;
    let origin = Vector3::from(bbox.min) - Vector3::repeat(pad * h);
    let ext = bbox.extent() + Vector3::repeat(2.0 * pad * h);
    let dims = [0, 1, 2].map(|k| (ext[k] / h).ceil() as usize + 1);
    let total = dims[0] * dims[1] * dims[2];

    let index = PointIndex::new(&points.points);
    let sigma = cfg.kernel_cells * h;
    let mut grid = Grid {
        origin,
        h,
        dims,
        values: Vec::new(),
    };
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|id| {
            let x = grid.position(id);
            let near = index.nearest_k(&x, cfg.neighbors.max(1));
            let mut num = 0.0;
            let mut den = 0.0;
            for &(j, d2) in &near {
                let w = (-0.5 * d2 / (sigma * sigma)).exp();
                num += w * points.normals[j].dot(&(x - points.points[j]));
                den += w;
            }
            if den > 1e-300 {
                num / den
            } else {
                let (j, _) = near[0];
                points.normals[j].dot(&(x - points.points[j]))
            }
        })
        .collect();
    grid.values = values;

    for _ in 0..cfg.smoothing_passes {
        let prev = grid.values.clone();
        grid.values = (0..total)
            .into_par_iter()
            .map(|id| {
                let [i, j, k] = grid.coords(id);
                let mut acc = 0.0;
                let mut n = 0.0;
                for (di, dj, dk) in [(-1i64, 0i64, 0i64), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                    let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                    if a < 0 || b < 0 || c < 0 || a >= dims[0] as i64 || b >= dims[1] as i64 || c >= dims[2] as i64 {
                        continue;
                    }
                    acc += prev[grid.id(a as usize, b as usize, c as usize)];
                    n += 1.0;
                }
                0.5 * prev[id] + 0.5 * acc / n
            })
            .collect();
    }

    // Strict sign: zero counts as free space, nudged so no vertex lands on a node.
    let eps = 1e-9 * h;
    for id in 0..total {
        let [i, j, k] = grid.coords(id);
        let border = i == 0 || j == 0 || k == 0 || i + 1 == dims[0] || j + 1 == dims[1] || k + 1 == dims[2];
        let v = &mut grid.values[id];
        if border {
            *v = v.abs().max(h);
        } else if *v >= 0.0 && *v < eps {
            *v = eps;
        }
    }

    Ok(marching_tetrahedra(&grid))
}

/// Even permutations of (0, 1, 2, 3).
const EVEN: [[usize; 4]; 12] = [
    [0, 1, 2, 3], [0, 2, 3, 1], [0, 3, 1, 2],
    [1, 0, 3, 2], [1, 2, 0, 3], [1, 3, 2, 0],
    [2, 0, 1, 3], [2, 1, 3, 0], [2, 3, 0, 1],
    [3, 0, 2, 1], [3, 1, 0, 2], [3, 2, 1, 0],
];

fn marching_tetrahedra(grid: &Grid) -> CollisionMesh {
    let [nx, ny, nz] = grid.dims;
    let corner = |c: usize| [(c & 1), (c >> 1) & 1, (c >> 2) & 1];
    // Kuhn split: one tetrahedron per axis order, all sharing the main diagonal.
    let mut tets: Vec<[usize; 4]> = Vec::new();
    for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let mut c = 0usize;
        let mut t = [0usize; 4];
        for (s, &axis) in perm.iter().enumerate() {
            c |= 1 << axis;
            t[s + 1] = c;
        }
        tets.push(t);
    }

    // Each cube slab is processed independently; results are merged in order.
    let slabs: Vec<Vec<[(usize, usize); 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let node = |c: usize| {
                        let [a, b, d] = corner(c);
                        grid.id(i + a, j + b, k + d)
                    };
                    for t in &tets {
                        let mut ids = t.map(node);
                        let pos = ids.map(|id| grid.position(id));
                        let det = (pos[1] - pos[0]).dot(&(pos[2] - pos[0]).cross(&(pos[3] - pos[0])));
                        if det < 0.0 {
                            ids.swap(2, 3);
                        }
                        emit_tet(&ids, &grid.values, &mut tris);
                    }
                }
            }
            tris
        })
        .collect();

    let mut vertex_of: HashMap<(usize, usize), u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for tris in slabs {
        for tri in tris {
            let f = tri.map(|(a, b)| {
                *vertex_of.entry((a, b)).or_insert_with(|| {
                    let (fa, fb) = (grid.values[a], grid.values[b]);
                    let t = fa / (fa - fb);
                    let p = grid.position(a) + (grid.position(b) - grid.position(a)) * t;
                    vertices.push(p);
                    (vertices.len() - 1) as u32
                })
            });
            faces.push(f);
        }
    }
    CollisionMesh::new(vertices, faces)
}

/// Triangles of one positively oriented tetrahedron; each vertex is named by
/// its grid edge (smaller node id first). Normals face the positive side.
fn emit_tet(ids: &[usize; 4], values: &[f64], out: &mut Vec<[(usize, usize); 3]>) {
    let neg: Vec<bool> = ids.iter().map(|&id| values[id] < 0.0).collect();
    let count = neg.iter().filter(|&&n| n).count();
    if count == 0 || count == 4 {
        return;
    }
    let edge = |a: usize, b: usize| {
        let (x, y) = (ids[a], ids[b]);
        if neg[a] {
            (x, y)
        } else {
            (y, x)
        }
    };
    match count {
        1 | 3 => {
            let lone_is_neg = count == 1;
            let p = EVEN
                .iter()
                .find(|p| neg[p[0]] == lone_is_neg)
                .expect("some even permutation starts with the lone vertex");
            let (v, x, y, z) = (p[0], p[1], p[2], p[3]);
            if lone_is_neg {
                out.push([edge(v, x), edge(v, y), edge(v, z)]);
            } else {
                out.push([edge(v, x), edge(v, z), edge(v, y)]);
            }
        }
        _ => {
            let p = EVEN
                .iter()
                .find(|p| neg[p[0]] && neg[p[1]])
                .expect("some even permutation starts with both negatives");
            let (v, w, x, y) = (p[0], p[1], p[2], p[3]);
            out.push([edge(v, x), edge(v, y), edge(w, y)]);
            out.push([edge(v, x), edge(w, y), edge(w, x)]);
        }
    }
}
