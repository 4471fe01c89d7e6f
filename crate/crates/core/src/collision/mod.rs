//! Watertight, plane-regularised collision proxy of the background.

mod planarize;
mod points;
mod ransac;
mod sdf;
mod simplify;
mod surface;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use planarize::{planarize, PlanarizeStats};
pub use points::{sample_points, OrientedPoints, Orientation, SamplingConfig};
pub use ransac::{classify_plane, detect_planes, PlaneHypothesis, RansacConfig};
pub use sdf::MeshSdf;
pub use simplify::{simplify, SimplifyStats};
pub use surface::{reconstruct_surface, SurfaceConfig};

use crate::error::{Error, Result};
use crate::scene::Aabb;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceClass {
    Floor,
    Wall,
    Ceiling,
    Free,
}

/// Plane `normal · x = offset` with a unit normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    /// Normalises `normal` and rescales the offset to match.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Self {
        let len = normal.norm();
        Self {
            normal: normal / len,
            offset: offset / len,
        }
    }

    pub fn through(point: &Vector3<f64>, normal: &Vector3<f64>) -> Self {
        let n = normal.normalize();
        Self {
            normal: n,
            offset: n.dot(point),
        }
    }

    #[inline]
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p - self.normal * self.signed_distance(p)
    }

    pub fn flipped(&self) -> Self {
        Self {
            normal: -self.normal,
            offset: -self.offset,
        }
    }
}

/// Closed triangle mesh with per-face classes and the planes they lie on.
///
/// Faces are wound counter-clockwise when seen from free space, so normals
/// point away from the solid.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CollisionMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub face_class: Vec<FaceClass>,
    /// Index into `planes` for faces lying on a detected plane.
    pub face_plane: Vec<Option<u32>>,
    pub planes: Vec<(Plane, FaceClass)>,
    /// Optional per-vertex colour; empty when absent.
    pub colors: Vec<[f64; 3]>,
}

impl CollisionMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[u32; 3]>) -> Self {
        let n = faces.len();
        Self {
            vertices,
            faces,
            face_class: vec![FaceClass::Free; n],
            face_plane: vec![None; n],
            planes: Vec::new(),
            colors: Vec::new(),
        }
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn corners(&self, f: usize) -> [Vector3<f64>; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    /// Area-weighted normal (twice the area in length).
    pub fn face_normal_raw(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(f);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| 0.5 * self.face_normal_raw(f).norm()).sum()
    }

    /// Signed enclosed volume; positive for outward-wound closed solids.
    pub fn volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    /// Check that every undirected edge borders exactly two faces with
    /// opposite orientation and that no face repeats a vertex.
    pub fn check_watertight(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::Geometry("mesh has no faces".into()));
        }
        let mut directed: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.faces.len() * 3);
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= self.vertices.len()) {
                return Err(Error::Geometry(format!("face {fi} references a missing vertex")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Geometry(format!("face {fi} repeats a vertex")));
            }
            for k in 0..3 {
                let e = (f[k], f[(k + 1) % 3]);
                let count = directed.entry(e).or_insert(0);
                *count += 1;
                if *count > 1 {
                    return Err(Error::Geometry(format!(
                        "directed edge {}->{} used twice (inconsistent winding or non-manifold)",
                        e.0, e.1
                    )));
                }
            }
        }
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) {
                return Err(Error::Geometry(format!("edge {a}-{b} borders only one face")));
            }
        }
        Ok(())
    }

    pub fn is_watertight(&self) -> bool {
        self.check_watertight().is_ok()
    }

    /// Connected components of faces (through shared vertices), as face lists.
    pub fn shells(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in &self.faces {
            for k in 1..3 {
                let (a, b) = (find(&mut parent, f[0] as usize), find(&mut parent, f[k] as usize));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (fi, f) in self.faces.iter().enumerate() {
            let root = find(&mut parent, f[0] as usize);
            groups.entry(root).or_default().push(fi);
        }
        groups.into_values().collect()
    }

    /// Drop unreferenced vertices and renumber faces.
    pub fn compact(&mut self) {
        let mut map = vec![u32::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        let mut colors = Vec::new();
        for f in self.faces.iter_mut() {
            for v in f.iter_mut() {
                let old = *v as usize;
                if map[old] == u32::MAX {
                    map[old] = verts.len() as u32;
                    verts.push(self.vertices[old]);
                    if !self.colors.is_empty() {
                        colors.push(self.colors[old]);
                    }
                }
                *v = map[old];
            }
        }
        self.vertices = verts;
        self.colors = colors;
    }

    /// Uniform area-weighted surface samples, deterministic in `seed`.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vector3<f64>> {
        use rand::distributions::{Distribution, WeightedIndex};
        use rand::{Rng, SeedableRng};
        let areas: Vec<f64> = (0..self.faces.len())
            .map(|f| self.face_normal_raw(f).norm())
            .collect();
        let Ok(dist) = WeightedIndex::new(&areas) else {
            return Vec::new();
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let [a, b, c] = self.corners(dist.sample(&mut rng));
                let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.vertices.iter().enumerate() {
            match self.colors.get(i) {
                Some(c) => writeln!(s, "v {} {} {} {} {} {}", v.x, v.y, v.z, c[0], c[1], c[2]),
                None => writeln!(s, "v {} {} {}", v.x, v.y, v.z),
            }
            .expect("string write");
        }
        for f in &self.faces {
            writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
        }
        s
    }

    /// Parse the subset of OBJ written by [`CollisionMesh::to_obj`]; classes default to free.
    pub fn from_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut colors = Vec::new();
        let mut faces = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = |what: &str| Error::Format(format!("obj line {}: {what}", ln + 1));
            match it.next() {
                Some("v") => {
                    let vals: Vec<f64> = it
                        .map(|t| t.parse::<f64>().map_err(|_| bad("bad number")))
                        .collect::<Result<_>>()?;
                    match vals.len() {
                        3 => {}
                        6 => colors.push([vals[3], vals[4], vals[5]]),
                        _ => return Err(bad("vertex needs 3 or 6 values")),
                    }
                    vertices.push(Vector3::new(vals[0], vals[1], vals[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|t| {
                            t.split('/')
                                .next()
                                .and_then(|x| x.parse::<u32>().ok())
                                .filter(|&x| x >= 1)
                                .map(|x| x - 1)
                                .ok_or_else(|| bad("bad face index"))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(bad("only triangles are supported"));
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        if !colors.is_empty() && colors.len() != vertices.len() {
            return Err(Error::Format("obj: colours given for only some vertices".into()));
        }
        if faces.iter().flatten().any(|&i| i as usize >= vertices.len()) {
            return Err(Error::Format("obj: face index out of range".into()));
        }
        let mut m = Self::new(vertices, faces);
        m.colors = colors;
        Ok(m)
    }

    pub fn meta(&self) -> MeshMeta {
        let mut ranges: Vec<FaceRange> = Vec::new();
        for (i, (&class, &plane)) in self.face_class.iter().zip(&self.face_plane).enumerate() {
            match ranges.last_mut() {
                Some(r) if r.class == class && r.plane == plane && r.end == i => r.end = i + 1,
                _ => ranges.push(FaceRange {
                    start: i,
                    end: i + 1,
                    class,
                    plane,
                }),
            }
        }
        MeshMeta {
            planes: self
                .planes
                .iter()
                .map(|(p, c)| PlaneRecord {
                    normal: [p.normal.x, p.normal.y, p.normal.z],
                    offset: p.offset,
                    class: *c,
                })
                .collect(),
            face_ranges: ranges,
        }
    }

    pub fn apply_meta(&mut self, meta: &MeshMeta) -> Result<()> {
        let n = self.faces.len();
        let mut class = vec![None; n];
        let mut plane = vec![None; n];
        for r in &meta.face_ranges {
            if r.start > r.end || r.end > n {
                return Err(Error::Format(format!("face range {}..{} outside {n} faces", r.start, r.end)));
            }
            if let Some(p) = r.plane {
                if p as usize >= meta.planes.len() {
                    return Err(Error::Format(format!("face range refers to missing plane {p}")));
                }
            }
            for i in r.start..r.end {
                class[i] = Some(r.class);
                plane[i] = r.plane;
            }
        }
        if class.iter().any(Option::is_none) {
            return Err(Error::Format("face ranges do not cover every face".into()));
        }
        self.face_class = class.into_iter().map(|c| c.expect("checked")).collect();
        self.face_plane = plane;
        self.planes = meta
            .planes
            .iter()
            .map(|r| {
                (
                    Plane {
                        normal: Vector3::from(r.normal),
                        offset: r.offset,
                    },
                    r.class,
                )
            })
            .collect();
        Ok(())
    }

    /// Write `<stem>.obj` and `<stem>.meta.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let obj = dir.join(format!("{stem}.obj"));
        std::fs::write(&obj, self.to_obj()).map_err(|e| Error::io(&obj, e))?;
        let meta = dir.join(format!("{stem}.meta.json"));
        std::fs::write(&meta, serde_json::to_string_pretty(&self.meta())?).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let obj = dir.join(format!("{stem}.obj"));
        let text = std::fs::read_to_string(&obj).map_err(|e| Error::io(&obj, e))?;
        let mut mesh = Self::from_obj(&text)?;
        let meta_path = dir.join(format!("{stem}.meta.json"));
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: MeshMeta = serde_json::from_str(&meta_text)?;
        mesh.apply_meta(&meta)?;
        Ok(mesh)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneRecord {
    pub normal: [f64; 3],
    pub offset: f64,
    pub class: FaceClass,
}

/// Half-open run of faces sharing a class and plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRange {
    pub start: usize,
    pub end: usize,
    pub class: FaceClass,
    pub plane: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshMeta {
    pub planes: Vec<PlaneRecord>,
    pub face_ranges: Vec<FaceRange>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollisionConfig {
    pub samples: usize,
    pub sampling: SamplingConfig,
    pub surface: SurfaceConfig,
    pub ransac: RansacConfig,
    /// Snap distance in RANSAC thresholds.
    pub snap_factor: f64,
    pub target_faces: usize,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        Self {
            samples: 20_000,
            sampling: SamplingConfig::default(),
            surface: SurfaceConfig::default(),
            ransac: RansacConfig::default(),
            snap_factor: 2.0,
            target_faces: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub planes: Vec<(Plane, FaceClass)>,
    pub ransac_threshold: f64,
    pub snap_distance: f64,
    pub planarize: PlanarizeStats,
    pub simplify: SimplifyStats,
}

/// Gaussians to a watertight, plane-snapped, decimated proxy.
pub fn build_proxy(scene: &crate::scene::GaussianScene, cfg: &CollisionConfig) -> Result<(CollisionMesh, ProxyReport)> {
    if !(cfg.snap_factor >= 0.0) {
        return Err(Error::Config("collision: snap_factor must be >= 0".into()));
    }
    let points = sample_points(scene, cfg.samples, &cfg.sampling)?;
    let raw = reconstruct_surface(&points, &cfg.surface)?;
    let planes: Vec<(Plane, FaceClass)> = detect_planes(&points.points, &cfg.ransac)?
        .into_iter()
        .map(|h| (h.plane, h.class))
        .collect();
    let thr = cfg.ransac.threshold_for(&points.points);
    let snap = cfg.snap_factor * thr;
    let (flat, planarize_stats) = planarize(&raw, &planes, snap)?;
    let (mesh, simplify_stats) = simplify(&flat, cfg.target_faces)?;
    mesh.check_watertight()?;
    Ok((
        mesh,
        ProxyReport {
            planes,
            ransac_threshold: thr,
            snap_distance: snap,
            planarize: planarize_stats,
            simplify: simplify_stats,
        },
    ))
}

/// Axis-aligned closed box, wound outward.
pub fn box_mesh(min: Vector3<f64>, max: Vector3<f64>) -> CollisionMesh {
    let v = (0..8)
        .map(|i| {
            Vector3::new(
                if i & 1 == 0 { min.x } else { max.x },
                if i & 2 == 0 { min.y } else { max.y },
                if i & 4 == 0 { min.z } else { max.z },
            )
        })
        .collect();
    let faces = vec![
        [0, 2, 3], [0, 3, 1], // -z
        [4, 5, 7], [4, 7, 6], // +z
        [0, 1, 5], [0, 5, 4], // -y
        [2, 6, 7], [2, 7, 3], // +y
        [0, 4, 6], [0, 6, 2], // -x
        [1, 3, 7], [1, 7, 5], // +x
    ];
    CollisionMesh::new(v, faces)
}

/// Geodesic sphere by repeated subdivision of an octahedron.
pub fn sphere_mesh(center: Vector3<f64>, radius: f64, subdivisions: usize) -> CollisionMesh {
    let mut verts: Vec<Vector3<f64>> = vec![
        Vector3::x(),
        -Vector3::x(),
        Vector3::y(),
        -Vector3::y(),
        Vector3::z(),
        -Vector3::z(),
    ];
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
        [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                (verts.len() - 1) as u32
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = verts.into_iter().map(|v| center + v * radius).collect();
    CollisionMesh::new(vertices, faces)
}
