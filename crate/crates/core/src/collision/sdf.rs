use std::f64::consts::PI;

use nalgebra::Vector3;

use super::CollisionMesh;

type Tri = [Vector3<f64>; 3];

/// Signed distance to the union of closed meshes: negative inside solid.
///
/// Magnitude is the exact closest-triangle distance; the sign comes from the
/// generalised winding number, which is robust to small defects.
pub struct MeshSdf {
    shapes: Vec<Bvh>,
}

impl MeshSdf {
    pub fn new(meshes: &[&CollisionMesh]) -> Self {
        Self {
            shapes: meshes
                .iter()
                .filter(|m| !m.faces.is_empty())
                .map(|m| Bvh::new((0..m.faces.len()).map(|f| m.corners(f)).collect()))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.shapes
            .iter()
            .map(|b| {
                let d = b.closest_distance(p);
                if b.winding(p) > 0.5 {
                    -d
                } else {
                    d
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn unsigned_distance(&self, p: &Vector3<f64>) -> f64 {
        self.shapes
            .iter()
            .map(|b| b.closest_distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

struct Node {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    /// Leaf: range into `order`; inner: children indices.
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

struct Bvh {
    tris: Vec<Tri>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl Bvh {
    fn new(tris: Vec<Tri>) -> Self {
        let mut bvh = Bvh {
            order: (0..tris.len()).collect(),
            tris,
            nodes: Vec::new(),
        };
        let n = bvh.tris.len();
        bvh.build(0, n);
        bvh
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &t in &self.order[start..end] {
            for v in &self.tris[t] {
                lo = lo.inf(v);
                hi = hi.sup(v);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            start,
            end,
            children: None,
        });
        if end - start > 8 {
            let axis = (hi - lo).imax();
            let tris = &self.tris;
            let centroid = |t: usize| (tris[t][0][axis] + tris[t][1][axis] + tris[t][2][axis]) / 3.0;
            let mid = (start + end) / 2;
            self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| centroid(a).total_cmp(&centroid(b)));
            let l = self.build(start, mid);
            let r = self.build(mid, end);
            self.nodes[id].children = Some((l, r));
        }
        id
    }

    fn box_distance2(node: &Node, p: &Vector3<f64>) -> f64 {
        let d = (node.lo - p).sup(&(p - node.hi)).sup(&Vector3::zeros());
        d.norm_squared()
    }

    fn closest_distance(&self, p: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if Self::box_distance2(node, p) >= best {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    let (dl, dr) = (
                        Self::box_distance2(&self.nodes[l], p),
                        Self::box_distance2(&self.nodes[r], p),
                    );
                    // visit the nearer child first
                    if dl < dr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
                None => {
                    for &t in &self.order[node.start..node.end] {
                        let q = closest_point_on_triangle(p, &self.tris[t]);
                        best = best.min((q - p).norm_squared());
                    }
                }
            }
        }
        best.sqrt()
    }

    fn winding_number(&self, p: &Vector3<f64>) -> f64 {
        let total: f64 = self.tris.iter().map(|t| solid_angle(p, t)).sum();
        total / (4.0 * PI)
    }

    /// Winding number of a closed mesh. Outside the bounds it is zero;
    /// inside it equals the signed count of crossings along any ray, found
    /// through the hierarchy. Rays that graze an edge are retried in other
    /// directions before falling back to the solid-angle sum.
    fn winding(&self, p: &Vector3<f64>) -> f64 {
        let root = &self.nodes[0];
        if (0..3).any(|i| p[i] < root.lo[i] || p[i] > root.hi[i]) {
            return 0.0;
        }
        for dir in RAY_DIRECTIONS {
            if let Some(n) = self.crossings(p, &Vector3::from(dir)) {
                return n as f64;
            }
        }
        self.winding_number(p)
    }

    /// Signed crossings (+1 leaving through the outside of a face), or
    /// `None` when the ray passes too close to an edge to tell.
    fn crossings(&self, p: &Vector3<f64>, dir: &Vector3<f64>) -> Option<i64> {
        let inv = dir.map(|d| 1.0 / d);
        let mut count = 0i64;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if !ray_hits_box(p, &inv, &node.lo, &node.hi) {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
                None => {
                    for &t in &self.order[node.start..node.end] {
                        count += ray_crossing(p, dir, &self.tris[t])?;
                    }
                }
            }
        }
        Some(count)
    }
}

/// Directions without special alignment to axis-aligned geometry.
const RAY_DIRECTIONS: [[f64; 3]; 3] = [
    [0.5773, 0.5917, 0.5627],
    [-0.6142, 0.4871, -0.6208],
    [0.3315, -0.7389, 0.5866],
];

fn ray_hits_box(o: &Vector3<f64>, inv: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> bool {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for i in 0..3 {
        let a = (lo[i] - o[i]) * inv[i];
        let b = (hi[i] - o[i]) * inv[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    t0 <= t1
}

/// +1/-1 when the ray crosses the triangle from its back/front side (the
/// sign a point inside an outward-wound solid accumulates), 0 on a miss,
/// `None` when the hit is too close to an edge or the ray is tangent.
fn ray_crossing(o: &Vector3<f64>, dir: &Vector3<f64>, t: &Tri) -> Option<i64> {
    const EPS: f64 = 1e-9;
    let e1 = t[1] - t[0];
    let e2 = t[2] - t[0];
    let pv = dir.cross(&e2);
    let det = e1.dot(&pv);
    let scale = e1.norm() * e2.norm();
    if scale == 0.0 {
        return Some(0);
    }
    let tv = o - t[0];
    let qv = tv.cross(&e1);
    if det.abs() <= EPS * scale {
        // parallel: only ambiguous if the ray lies in the triangle's plane
        return if tv.dot(&e1.cross(&e2)).abs() <= EPS * scale * tv.norm().max(1.0) {
            None
        } else {
            Some(0)
        };
    }
    let u = tv.dot(&pv) / det;
    let v = dir.dot(&qv) / det;
    let dist = e2.dot(&qv) / det;
    let (w, m) = (1.0 - u - v, EPS.sqrt());
    if u < -m || v < -m || w < -m || dist < -m {
        return Some(0);
    }
    if u < m || v < m || w < m || dist < m {
        return None;
    }
    Some(if det < 0.0 { 1 } else { -1 })
}

/// Signed solid angle subtended by a triangle at `p`.
fn solid_angle(p: &Vector3<f64>, t: &Tri) -> f64 {
    let a = t[0] - p;
    let b = t[1] - p;
    let c = t[2] - p;
    let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
    let num = a.dot(&b.cross(&c));
    let den = la * lb * lc + a.dot(&b) * lc + a.dot(&c) * lb + b.dot(&c) * la;
    2.0 * num.atan2(den)
}

pub(crate) fn closest_point_on_triangle(p: &Vector3<f64>, t: &Tri) -> Vector3<f64> {
    let (a, b, c) = (t[0], t[1], t[2]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{box_mesh, sphere_mesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_box_distances() {
        let b = box_mesh(Vector3::zeros(), Vector3::repeat(1.0));
        let sdf = MeshSdf::new(&[&b]);
        assert!((sdf.signed_distance(&Vector3::repeat(0.5)) + 0.5).abs() < 1e-12);
        assert!((sdf.signed_distance(&Vector3::new(2.0, 0.5, 0.5)) - 1.0).abs() < 1e-12);
        assert!((sdf.signed_distance(&Vector3::new(0.5, -0.25, 0.5)) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bounded_by_vertex_distance_and_matches_brute_force() {
        let s = sphere_mesh(Vector3::new(0.2, 0.0, -0.1), 1.0, 3);
        let sdf = MeshSdf::new(&[&s]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let d = sdf.signed_distance(&p);
            let vmin = s.vertices.iter().map(|v| (v - p).norm()).fold(f64::INFINITY, f64::min);
            assert!(d.abs() <= vmin + 1e-12);
            let brute = (0..s.faces.len())
                .map(|f| (closest_point_on_triangle(&p, &s.corners(f)) - p).norm())
                .fold(f64::INFINITY, f64::min);
            assert!((d.abs() - brute).abs() < 1e-12);
            let inside = (p - Vector3::new(0.2, 0.0, -0.1)).norm() < 0.95;
            if inside {
                assert!(d < 0.0);
            }
        }
    }

    #[test]
    fn ray_winding_agrees_with_the_solid_angle_sum() {
        let room = {
            let mut inner = box_mesh(Vector3::new(-2.0, 0.0, -2.0), Vector3::new(2.0, 3.0, 2.0));
            for f in inner.faces.iter_mut() {
                f.swap(1, 2);
            }
            let outer = box_mesh(Vector3::repeat(-3.0), Vector3::repeat(4.0));
            let n = inner.vertices.len() as u32;
            inner.vertices.extend(outer.vertices.iter());
            inner.faces.extend(outer.faces.iter().map(|t| [t[0] + n, t[1] + n, t[2] + n]));
            CollisionMesh::new(inner.vertices, inner.faces)
        };
        let meshes = [
            sphere_mesh(Vector3::new(0.2, 0.0, -0.1), 1.0, 3),
            box_mesh(Vector3::zeros(), Vector3::repeat(1.0)),
            room,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in &meshes {
            let bvh = Bvh::new((0..m.faces.len()).map(|f| m.corners(f)).collect());
            // random points plus a lattice that lines up with vertices and edges
            let mut pts: Vec<Vector3<f64>> = (0..300)
                .map(|_| Vector3::new(rng.gen_range(-4.0..5.0), rng.gen_range(-4.0..5.0), rng.gen_range(-4.0..5.0)))
                .collect();
            for i in -4..=5 {
                for j in -4..=5 {
                    pts.push(Vector3::new(i as f64 * 0.5, j as f64 * 0.5, 0.25));
                }
            }
            for p in pts {
                let exact = bvh.winding_number(&p);
                if (exact - exact.round()).abs() > 1e-6 {
                    continue; // on the surface
                }
                assert_eq!(bvh.winding(&p).round(), exact.round(), "{p:?}");
            }
        }
    }
}
