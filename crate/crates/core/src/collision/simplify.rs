use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use nalgebra::{Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::{CollisionMesh, FaceClass, MeshSdf};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimplifyStats {
    pub input_faces: usize,
    pub output_faces: usize,
    pub collapses: usize,
    /// Sampled distance from the simplified surface to the input surface.
    pub hausdorff_to_input: f64,
    /// Sampled distance from the input surface to the simplified one.
    pub hausdorff_from_input: f64,
}

impl SimplifyStats {
    pub fn hausdorff(&self) -> f64 {
        self.hausdorff_to_input.max(self.hausdorff_from_input)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Cost(f64);

impl Eq for Cost {}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

type Region = (FaceClass, Option<u32>);
type Entry = (Cost, u32, u32, u32, u32);

struct Decimator<'a> {
    mesh: &'a CollisionMesh,
    pos: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    alive: Vec<bool>,
    vertex_faces: Vec<Vec<usize>>,
    quadric: Vec<Matrix4<f64>>,
    version: Vec<u32>,
    shell_of: Vec<usize>,
    shell_faces: Vec<usize>,
    heap: BinaryHeap<Reverse<Entry>>,
}

impl<'a> Decimator<'a> {
    fn new(mesh: &'a CollisionMesh) -> Self {
        let n = mesh.vertices.len();
        let mut vertex_faces = vec![Vec::new(); n];
        let mut quadric = vec![Matrix4::zeros(); n];
        for (f, face) in mesh.faces.iter().enumerate() {
            let raw = mesh.face_normal_raw(f);
            let area = 0.5 * raw.norm();
            if area > 0.0 {
                let nrm = raw.normalize();
                let p = Vector4::new(nrm.x, nrm.y, nrm.z, -nrm.dot(&mesh.vertices[face[0] as usize]));
                let q = p * p.transpose() * area;
                for &v in face {
                    quadric[v as usize] += q;
                }
            }
            for &v in face {
                vertex_faces[v as usize].push(f);
            }
        }
        let shells = mesh.shells();
        let mut shell_of = vec![0; mesh.faces.len()];
        for (s, fs) in shells.iter().enumerate() {
            for &f in fs {
                shell_of[f] = s;
            }
        }
        Self {
            mesh,
            pos: mesh.vertices.clone(),
            faces: mesh.faces.clone(),
            alive: vec![true; mesh.faces.len()],
            vertex_faces,
            quadric,
            version: vec![0; n],
            shell_of,
            shell_faces: shells.iter().map(Vec::len).collect(),
            heap: BinaryHeap::new(),
        }
    }

    fn region(&self, f: usize) -> Region {
        (self.mesh.face_class[f], self.mesh.face_plane[f])
    }

    fn neighbours(&self, v: usize) -> Vec<u32> {
        let mut out: Vec<u32> = self.vertex_faces[v]
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&w| w as usize != v)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn free_only(&self, v: usize) -> bool {
        self.vertex_faces[v].iter().all(|&f| self.region(f) == (FaceClass::Free, None))
    }

    /// Where the merged vertex goes when `u` is collapsed into `v`, or `None`
    /// when the collapse would drag a tagged region off its plane. Inside
    /// untagged areas the quadric-optimal point is used; anywhere near a
    /// tagged face `v` stays put.
    fn placement(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        if self.free_only(u) && self.free_only(v) {
            let q = self.quadric[u] + self.quadric[v];
            let a = q.fixed_view::<3, 3>(0, 0).into_owned();
            let b = -q.fixed_view::<3, 1>(0, 3).into_owned();
            let scale = a.norm();
            let solved = a
                .try_inverse()
                .filter(|inv| scale > 0.0 && inv.norm() * scale < 1e8)
                .map(|inv| inv * b);
            let (pu, pv) = (self.pos[u], self.pos[v]);
            let fallback = [pv, pu, (pu + pv) * 0.5]
                .into_iter()
                .min_by(|x, y| self.error_at(&q, x).total_cmp(&self.error_at(&q, y)))
                .expect("three candidates");
            // a far-off optimum means the quadric is nearly flat in that direction
            return Some(match solved {
                Some(x) if (x - pv).norm() <= 2.0 * (pu - pv).norm() => x,
                _ => fallback,
            });
        }
        let regions_v: Vec<Region> = self.vertex_faces[v].iter().map(|&f| self.region(f)).collect();
        if self.vertex_faces[u].iter().any(|&f| !regions_v.contains(&self.region(f))) {
            return None;
        }
        Some(self.pos[v])
    }

    fn error_at(&self, q: &Matrix4<f64>, x: &Vector3<f64>) -> f64 {
        let h = x.push(1.0);
        (h.transpose() * q * h)[0].max(0.0)
    }

    fn candidate(&self, u: usize, v: usize) -> Option<Reverse<Entry>> {
        let x = self.placement(u, v)?;
        // Edge length breaks the many exact ties inside flat regions in favour
        // of short edges, which keeps valences low and the result even.
        let c = self.error_at(&(self.quadric[u] + self.quadric[v]), &x)
            + 1e-2 * (self.pos[u] - self.pos[v]).norm_squared().powi(2);
        Some(Reverse((Cost(c), u as u32, v as u32, self.version[u], self.version[v])))
    }

    fn push_edges_of(&mut self, v: usize) {
        for w in self.neighbours(v) {
            let w = w as usize;
            for (a, b) in [(v, w), (w, v)] {
                if let Some(e) = self.candidate(a, b) {
                    self.heap.push(e);
                }
            }
        }
    }

    /// Whether merging `u` into `v` at `x` keeps the mesh closed, manifold
    /// and unfolded.
    fn can_collapse(&self, u: usize, v: usize, x: &Vector3<f64>) -> bool {
        let shared: Vec<usize> = self.vertex_faces[u]
            .iter()
            .copied()
            .filter(|&f| self.faces[f].contains(&(v as u32)))
            .collect();
        if shared.len() != 2 {
            return false;
        }
        if self.shell_faces[self.shell_of[shared[0]]] < 6 {
            return false;
        }
        // link condition: the only common neighbours are the two opposite corners
        let nu = self.neighbours(u);
        let nv = self.neighbours(v);
        let common = nu.iter().filter(|w| nv.binary_search(w).is_ok()).count();
        if common != 2 {
            return false;
        }
        for &f in self.vertex_faces[u].iter().chain(&self.vertex_faces[v]) {
            if shared.contains(&f) {
                continue;
            }
            let c = self.faces[f].map(|i| self.pos[i as usize]);
            let before = (c[1] - c[0]).cross(&(c[2] - c[0]));
            let c2 = self.faces[f].map(|i| if i as usize == u || i as usize == v { *x } else { self.pos[i as usize] });
            let after = (c2[1] - c2[0]).cross(&(c2[2] - c2[0]));
            if after.dot(&before) <= 1e-3 * after.norm() * before.norm() {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, u: usize, v: usize, x: Vector3<f64>) {
        self.pos[v] = x;
        let faces_u = std::mem::take(&mut self.vertex_faces[u]);
        for f in faces_u {
            if self.faces[f].contains(&(v as u32)) {
                self.alive[f] = false;
                self.shell_faces[self.shell_of[f]] -= 1;
                for w in self.faces[f] {
                    if w as usize != u {
                        self.vertex_faces[w as usize].retain(|&g| g != f);
                    }
                }
            } else {
                for w in self.faces[f].iter_mut() {
                    if *w as usize == u {
                        *w = v as u32;
                    }
                }
                self.vertex_faces[v].push(f);
            }
        }
        let qu = self.quadric[u];
        self.quadric[v] += qu;
        self.version[u] += 1;
        self.version[v] += 1;
    }
}

/// Quadric-error decimation by half-edge collapse down to `target_faces`.
///
/// Near tagged faces a vertex only ever collapses onto a neighbour that
/// touches every plane or class region it touches, and that neighbour keeps
/// its position, so planar regions stay exactly planar and keep their tags. Collapses that
/// would break manifoldness, fold a face, or shrink a shell below a
/// tetrahedron are skipped; if none remain the result may stay above target.
pub fn simplify(mesh: &CollisionMesh, target_faces: usize) -> Result<(CollisionMesh, SimplifyStats)> {
    if target_faces < 4 {
        return Err(Error::Argument(format!(
            "target of {target_faces} faces is below the smallest closed mesh (4)"
        )));
    }
    mesh.check_watertight()?;
    let input_faces = mesh.faces.len();
    if target_faces >= input_faces {
        return Ok((
            mesh.clone(),
            SimplifyStats {
                input_faces,
                output_faces: input_faces,
                ..Default::default()
            },
        ));
    }

    let mut dec = Decimator::new(mesh);
    for v in 0..mesh.vertices.len() {
        for w in dec.neighbours(v) {
            if let Some(e) = dec.candidate(v, w as usize) {
                dec.heap.push(e);
            }
        }
    }
    let mut remaining = input_faces;
    let mut collapses = 0;
    while remaining > target_faces {
        let Some(Reverse((_, u, v, vu, vv))) = dec.heap.pop() else {
            break;
        };
        let (u, v) = (u as usize, v as usize);
        if dec.version[u] != vu || dec.version[v] != vv || dec.vertex_faces[u].is_empty() {
            continue;
        }
        let Some(x) = dec.placement(u, v) else { continue };
        if !dec.can_collapse(u, v, &x) {
            continue;
        }
        dec.collapse(u, v, x);
        remaining -= 2;
        collapses += 1;
        // only costs involving the merged vertex changed
        dec.push_edges_of(v);
    }

    let mut out = CollisionMesh {
        vertices: dec.pos.clone(),
        faces: Vec::with_capacity(remaining),
        face_class: Vec::with_capacity(remaining),
        face_plane: Vec::with_capacity(remaining),
        planes: mesh.planes.clone(),
        colors: mesh.colors.clone(),
    };
    for f in 0..dec.faces.len() {
        if dec.alive[f] {
            out.faces.push(dec.faces[f]);
            out.face_class.push(mesh.face_class[f]);
            out.face_plane.push(mesh.face_plane[f]);
        }
    }
    out.compact();

    let samples = 20_000;
    let to_input = {
        let sdf = MeshSdf::new(&[mesh]);
        out.sample_surface(samples, 1)
            .iter()
            .chain(&out.vertices)
            .map(|p| sdf.unsigned_distance(p))
            .fold(0.0, f64::max)
    };
    let from_input = {
        let sdf = MeshSdf::new(&[&out]);
        mesh.sample_surface(samples, 2)
            .iter()
            .chain(&mesh.vertices)
            .map(|p| sdf.unsigned_distance(p))
            .fold(0.0, f64::max)
    };
    let stats = SimplifyStats {
        input_faces,
        output_faces: out.faces.len(),
        collapses,
        hausdorff_to_input: to_input,
        hausdorff_from_input: from_input,
    };
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{box_mesh, sphere_mesh, Plane};

    #[test]
    fn rejects_tiny_targets_and_keeps_identity() {
        let b = box_mesh(Vector3::zeros(), Vector3::repeat(1.0));
        assert!(matches!(simplify(&b, 3), Err(Error::Argument(_))));
        let (same, stats) = simplify(&b, 12).unwrap();
        assert_eq!(same, b);
        assert_eq!(stats.collapses, 0);
    }

    #[test]
    fn sphere_decimation_stays_close() {
        let s = sphere_mesh(Vector3::zeros(), 1.0, 5);
        let (out, stats) = simplify(&s, 500).unwrap();
        out.check_watertight().unwrap();
        assert!(out.faces.len() <= 500);
        assert!(stats.hausdorff() <= 0.02, "{stats:?}");
        assert!(out.volume() > 0.0);
    }

    #[test]
    fn flat_regions_survive_with_their_tags() {
        // a finely tessellated cube whose bottom is tagged as floor
        let s = sphere_mesh(Vector3::zeros(), 1.0, 3);
        let mut cube = s.clone();
        for v in cube.vertices.iter_mut() {
            *v /= v.abs().max();
        }
        cube.planes = vec![(Plane::new(Vector3::y(), -1.0), FaceClass::Floor)];
        for f in 0..cube.faces.len() {
            if cube.corners(f).iter().all(|c| (c.y + 1.0).abs() < 1e-12) {
                cube.face_class[f] = FaceClass::Floor;
                cube.face_plane[f] = Some(0);
            }
        }
        let (out, _) = simplify(&cube, 60).unwrap();
        out.check_watertight().unwrap();
        let mut area = 0.0;
        for f in 0..out.faces.len() {
            if out.face_plane[f] == Some(0) {
                assert!(out.corners(f).iter().all(|c| (c.y + 1.0).abs() < 1e-12));
                area += 0.5 * out.face_normal_raw(f).norm();
            }
        }
        // the tagged patch may change outline, but never leaves its square
        assert!(area > 1.0 && area <= 4.0 + 1e-9, "{area}");
    }
}
