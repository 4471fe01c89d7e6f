//! Deterministic synthetic rooms with exact ground truth.
//!
//! A room is an axis-aligned box whose six inner faces and a handful of
//! primitive solids are covered with small flat Gaussian discs. Because the
//! geometry is analytic, silhouettes, plane parameters, memberships and poses
//! are known exactly and serve as oracles for every stage downstream.

mod oracle;
mod shapes;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use oracle::oracle_brute_render;
pub use shapes::{yaw_rotation, Shape, SurfaceSample};
#[cfg(test)]
pub(crate) use shapes::fibonacci_sphere;

use crate::collision::{FaceClass, Plane};
use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::scene::{CameraFrame, GaussianPrimitive, GaussianScene, Label, Trajectory};
use crate::segment::MaskStack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthObject {
    pub name: String,
    /// Other prompts that refer to the same object.
    #[serde(default)]
    pub aliases: Vec<String>,
    pub shape: Shape,
    /// Floor position (x, z) of the object's vertical axis.
    pub position: [f64; 2],
    /// Height of the object's base above the floor.
    #[serde(default)]
    pub elevation: f64,
    #[serde(default)]
    pub yaw_deg: f64,
    pub color: [f64; 3],
    #[serde(default = "yes")]
    pub portable: bool,
    /// Whether a discovery backend is able to name this object.
    #[serde(default = "yes")]
    pub discoverable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitSpec {
    pub frames: u32,
    pub width: u32,
    pub height: u32,
    pub radius: f64,
    pub eye_height: f64,
    pub target: [f64; 3],
    pub fov_y_deg: f64,
    pub start_deg: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            frames: 12,
            width: 128,
            height: 128,
            radius: 1.7,
            eye_height: 1.8,
            target: [0.0, 0.3, 0.0],
            fov_y_deg: 70.0,
            start_deg: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Room extent along x, y (height) and z; the floor is y = 0 and the room
    /// is centred on the vertical axis.
    pub room: [f64; 3],
    /// World up direction of the emitted scene. Geometry is built with +y up
    /// and rotated onto this axis.
    pub up: [f64; 3],
    pub wall_colors: [[f64; 3]; 6],
    pub objects: Vec<SynthObject>,
    /// Gaussians per unit area on room faces.
    pub background_density: f64,
    /// Gaussians per unit area on object surfaces.
    pub object_density: f64,
    pub opacity: f64,
    /// Standard deviation of Gaussian position jitter, in scene units.
    pub noise: f64,
    pub seed: u64,
    pub orbit: OrbitSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            room: [4.0, 3.0, 4.0],
            up: [0.0, 1.0, 0.0],
            // floor, ceiling, -x, +x, -z, +z
            wall_colors: [
                [0.55, 0.45, 0.35],
                [0.92, 0.92, 0.88],
                [0.75, 0.32, 0.30],
                [0.32, 0.62, 0.38],
                [0.30, 0.40, 0.75],
                [0.80, 0.74, 0.36],
            ],
            objects: default_objects(),
            background_density: 70.0,
            object_density: 700.0,
            opacity: 0.95,
            noise: 0.0,
            seed: 7,
            orbit: OrbitSpec::default(),
        }
    }
}

pub fn default_objects() -> Vec<SynthObject> {
    vec![
        SynthObject {
            name: "crate".into(),
            aliases: vec!["box".into()],
            shape: Shape::Box { size: [0.6, 0.5, 0.45] },
            position: [-0.7, 0.6],
            elevation: 0.0,
            yaw_deg: 20.0,
            color: [0.85, 0.55, 0.22],
            portable: true,
            discoverable: true,
        },
        SynthObject {
            name: "ball".into(),
            aliases: vec!["sphere".into()],
            shape: Shape::Sphere { radius: 0.3 },
            position: [0.8, 0.5],
            elevation: 0.0,
            yaw_deg: 0.0,
            color: [0.88, 0.22, 0.58],
            portable: true,
            discoverable: true,
        },
        SynthObject {
            name: "jar".into(),
            aliases: vec!["container".into()],
            shape: Shape::Cylinder {
                radius: 0.22,
                height: 0.55,
            },
            position: [0.1, -0.8],
            elevation: 0.0,
            yaw_deg: 0.0,
            color: [0.20, 0.72, 0.80],
            portable: true,
            discoverable: true,
        },
    ]
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.room.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return bad("room dimensions must be positive".into());
        }
        if Vector3::from(self.up).norm() < 1e-9 {
            return bad("up axis must be nonzero".into());
        }
        if !(self.background_density > 0.0 && self.object_density > 0.0) {
            return bad("densities must be positive".into());
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return bad("opacity must lie in (0, 1)".into());
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        let o = &self.orbit;
        if o.frames == 0 || o.width == 0 || o.height == 0 || !(o.fov_y_deg > 0.0 && o.fov_y_deg < 180.0) {
            return bad("orbit needs frames, image size and a field of view in (0, 180)".into());
        }
        let [rx, ry, rz] = self.room;
        for (i, ob) in self.objects.iter().enumerate() {
            if ob.name.trim().is_empty() {
                return bad(format!("object {i} has no name"));
            }
            if !ob.shape.is_valid() {
                return bad(format!("object `{}` has non-positive dimensions", ob.name));
            }
            let r = ob.shape.footprint_radius();
            let top = ob.elevation + 2.0 * ob.shape.half_height();
            if ob.position[0].abs() + r > 0.5 * rx
                || ob.position[1].abs() + r > 0.5 * rz
                || ob.elevation < 0.0
                || top > ry
            {
                return bad(format!("object `{}` does not fit inside the room", ob.name));
            }
            for other in &self.objects[..i] {
                let d = ((ob.position[0] - other.position[0]).powi(2)
                    + (ob.position[1] - other.position[1]).powi(2))
                .sqrt();
                let other_top = other.elevation + 2.0 * other.shape.half_height();
                let vertical = ob.elevation < other_top && other.elevation < top;
                if vertical && d < r + other.shape.footprint_radius() {
                    return bad(format!("objects `{}` and `{}` overlap", other.name, ob.name));
                }
            }
        }
        Ok(())
    }
}

/// Ground truth for one generated object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub id: Label,
    pub name: String,
    pub aliases: Vec<String>,
    pub portable: bool,
    pub discoverable: bool,
    pub shape: Shape,
    /// Local-to-world rotation of the solid.
    pub rotation: Matrix3<f64>,
    /// World position of the solid's geometric centre.
    pub center: Vector3<f64>,
    /// Indices of the object's Gaussians in the generated scene.
    pub members: Vec<usize>,
}

impl ObjectTruth {
    pub fn matches(&self, prompt: &str) -> bool {
        let p = prompt.trim().to_lowercase();
        self.name.to_lowercase() == p || self.aliases.iter().any(|a| a.to_lowercase() == p)
    }

    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.center)
    }
}

/// Room plane with its inward normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneTruth {
    pub plane: Plane,
    pub class: FaceClass,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: SynthSpec,
    /// Observed scene with ground-truth labels (object i has label i + 1).
    pub scene: GaussianScene,
    /// The empty room including surfaces hidden behind objects.
    pub background: GaussianScene,
    pub trajectory: Trajectory,
    /// Visible analytic silhouettes per object over all frames.
    pub masks: Vec<MaskStack>,
    pub planes: Vec<PlaneTruth>,
    pub objects: Vec<ObjectTruth>,
    up_rotation: Matrix3<f64>,
}

impl SynthScene {
    pub fn object_by_prompt(&self, prompt: &str) -> Option<&ObjectTruth> {
        self.objects.iter().find(|o| o.matches(prompt))
    }

    /// World up direction.
    pub fn up(&self) -> Vector3<f64> {
        self.up_rotation * Vector3::y()
    }

    /// First surface hit by a world ray: (object index or None for the room, t).
    pub fn first_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> (Option<usize>, f64) {
        // the room box is axis-aligned in the +y-up build frame
        let o = self.up_rotation.transpose() * origin;
        let d = self.up_rotation.transpose() * dir;
        let mut best = (None, room_exit(&self.spec.room, &o, &d));
        for (k, ob) in self.objects.iter().enumerate() {
            let lo = ob.to_local(origin);
            let ld = ob.rotation.transpose() * dir;
            if let Some(t) = ob.shape.intersect(&lo, &ld) {
                if t < best.1 {
                    best = (Some(k), t);
                }
            }
        }
        best
    }

    /// Visible silhouette of object `k` in one camera.
    pub fn silhouette(&self, k: usize, cam: &CameraFrame) -> Mask {
        silhouettes(self, cam).remove(k)
    }
}

fn room_exit(room: &[f64; 3], o: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    let lo = [-0.5 * room[0], 0.0, -0.5 * room[2]];
    let hi = [0.5 * room[0], room[1], 0.5 * room[2]];
    let mut t = f64::INFINITY;
    for k in 0..3 {
        if d[k] > 1e-15 {
            t = t.min((hi[k] - o[k]) / d[k]);
        } else if d[k] < -1e-15 {
            t = t.min((lo[k] - o[k]) / d[k]);
        }
    }
    t
}

/// One visible-silhouette mask per object for a camera.
fn silhouettes(synth: &SynthScene, cam: &CameraFrame) -> Vec<Mask> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let n = synth.objects.len();
    let origin = cam.center();
    let hits: Vec<Option<usize>> = (0..w * h)
        .into_par_iter()
        .map(|p| synth.first_hit(&origin, &cam.pixel_ray(p / w, p % w)).0)
        .collect();
    let mut masks = vec![Mask::filled(w, h, false); n];
    for (p, hit) in hits.into_iter().enumerate() {
        if let Some(k) = hit {
            masks[k].data_mut()[p] = true;
        }
    }
    masks
}

// Splats are flat discs lying in the surface, like a converged reconstruction.
// Isotropic blobs stick out of the surface by their full radius, and
// grazing views accumulate them into silhouettes visibly fatter than the
// geometry they sample.
const FLATNESS: f64 = 0.3;
/// Object splat centres sit this many tangent sigmas below the surface, so
/// the half-coverage contour lands on the true outline.
const SURFACE_INSET: f64 = 0.5;
/// Floor samples within this many floor sigmas of a resting object are
/// dropped; their discs would otherwise slide under the base and cover it.
const FLOOR_MARGIN: f64 = 1.0;

/// Baked diffuse shading so faces of one object are distinguishable.
fn shade(color: [f64; 3], normal: &Vector3<f64>) -> [f64; 3] {
    let light = Vector3::new(0.3, 0.8, 0.5).normalize();
    let f = 0.7 + 0.3 * normal.dot(&light);
    color.map(|c| (c * f).clamp(0.0, 1.0))
}

/// Build the room, objects, orbit trajectory and all ground truth.
pub fn generate(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut jitter_point = |p: Vector3<f64>| -> Vector3<f64> {
        if spec.noise > 0.0 {
            p + Vector3::new(jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            p
        }
    };

    let up = Vector3::from(spec.up).normalize();
    let up_rotation = Rotation3::rotation_between(&Vector3::y(), &up)
        .unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI))
        .into_inner();

    let objects: Vec<ObjectTruth> = spec
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| ObjectTruth {
            id: i as Label + 1,
            name: o.name.clone(),
            aliases: o.aliases.clone(),
            portable: o.portable,
            discoverable: o.discoverable,
            shape: o.shape,
            rotation: yaw_rotation(o.yaw_deg.to_radians()),
            center: Vector3::new(o.position[0], o.elevation + o.shape.half_height(), o.position[1]),
            members: Vec::new(),
        })
        .collect();

    // Trajectory in the build frame; rotated to the requested up axis below.
    let orbit = &spec.orbit;
    let target = Vector3::from(orbit.target);
    let build_cams: Vec<CameraFrame> = (0..orbit.frames)
        .map(|k| {
            let a = (orbit.start_deg + 360.0 * k as f64 / orbit.frames as f64).to_radians();
            let eye = Vector3::new(orbit.radius * a.cos(), orbit.eye_height, orbit.radius * a.sin());
            CameraFrame::look_at(eye, target, Vector3::y(), orbit.fov_y_deg, orbit.width, orbit.height, k)
        })
        .collect::<Result<_>>()?;

    // Room faces: (axis, value, inward sign, class).
    let [rx, ry, rz] = spec.room;
    let faces = [
        (1usize, 0.0, 1.0, FaceClass::Floor),
        (1, ry, -1.0, FaceClass::Ceiling),
        (0, -0.5 * rx, 1.0, FaceClass::Wall),
        (0, 0.5 * rx, -1.0, FaceClass::Wall),
        (2, -0.5 * rz, 1.0, FaceClass::Wall),
        (2, 0.5 * rz, -1.0, FaceClass::Wall),
    ];
    let bg_sigma = 0.5 / spec.background_density.sqrt();
    let margin = FLOOR_MARGIN * bg_sigma;
    let mut observed_bg = Vec::new();
    let mut full_bg = Vec::new();
    let mut planes = Vec::new();
    for (f, &(axis, value, sign, class)) in faces.iter().enumerate() {
        let mut normal = Vector3::zeros();
        normal[axis] = sign;
        planes.push(PlaneTruth {
            plane: Plane::new(up_rotation * normal, sign * value),
            class,
        });
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let lo = [-0.5 * rx, 0.0, -0.5 * rz];
        let ext = [rx, ry, rz];
        let color = spec.wall_colors[f];
        shapes::grid(ext[u], ext[v], 1.0 / spec.background_density.sqrt(), |a, b| {
            let mut p = Vector3::zeros();
            p[axis] = value;
            p[u] = lo[u] + a;
            p[v] = lo[v] + b;
            let hidden = class == FaceClass::Floor
                && objects.iter().any(|o| {
                    o.center.y - o.shape.half_height() < 1e-9 && {
                        let l = o.to_local(&p);
                        o.shape.covers_footprint(l.x, l.z, margin)
                    }
                });
            full_bg.push((p, normal, color));
            if !hidden {
                observed_bg.push((p, normal, color));
            }
        });
    }

    // Object surfaces, keeping only samples some camera can see.
    let probe = SynthScene {
        spec: spec.clone(),
        scene: GaussianScene::default(),
        background: GaussianScene::default(),
        trajectory: Trajectory::new(Vec::new())?,
        masks: Vec::new(),
        planes: Vec::new(),
        objects: objects.clone(),
        up_rotation: Matrix3::identity(),
    };
    let obj_sigma = 0.5 / spec.object_density.sqrt();
    let inset = SURFACE_INSET * obj_sigma;
    let mut object_points: Vec<Vec<(Vector3<f64>, Vector3<f64>, [f64; 3])>> = Vec::new();
    for (k, (o, so)) in objects.iter().zip(&spec.objects).enumerate() {
        let samples = o.shape.sample_surface(spec.object_density);
        let world: Vec<(Vector3<f64>, Vector3<f64>)> = samples
            .iter()
            .map(|s| (o.rotation * s.point + o.center, o.rotation * s.normal))
            .collect();
        let visible: Vec<bool> = world
            .par_iter()
            .map(|(p, n)| {
                build_cams.iter().any(|cam| {
                    let c = cam.center();
                    let to_cam = c - p;
                    if n.dot(&to_cam) <= 0.0 {
                        return false;
                    }
                    match cam.project(p) {
                        Some((x, y, _)) if x >= 0.0 && y >= 0.0 && x < cam.width as f64 && y < cam.height as f64 => {}
                        _ => return false,
                    }
                    let dist = to_cam.norm();
                    let dir = -to_cam / dist;
                    let (hit, t) = probe.first_hit(&c, &dir);
                    hit == Some(k) && (t - dist).abs() < 1e-6 * dist.max(1.0)
                })
            })
            .collect();
        object_points.push(
            world
                .into_iter()
                .zip(visible)
                .filter(|(_, v)| *v)
                .map(|((p, n), _)| (p - n * inset, n, shade(so.color, &n)))
                .collect(),
        );
    }

    let make = |p: Vector3<f64>, n: &Vector3<f64>, sigma: f64, color: [f64; 3]| {
        let n = up_rotation * n;
        let q = UnitQuaternion::rotation_between(&Vector3::z(), &n)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
        GaussianPrimitive::new(up_rotation * p, Vector3::new(sigma, sigma, sigma * FLATNESS), q, spec.opacity, color)
    };

    let mut prims = Vec::new();
    let mut labels = Vec::new();
    for (p, n, c) in &observed_bg {
        prims.push(make(jitter_point(*p), n, bg_sigma, *c));
        labels.push(0);
    }
    let mut objects = objects;
    for (k, pts) in object_points.iter().enumerate() {
        for (p, n, c) in pts {
            objects[k].members.push(prims.len());
            prims.push(make(jitter_point(*p), n, obj_sigma, *c));
            labels.push(objects[k].id);
        }
    }
    let scene = GaussianScene::with_labels(prims, labels)?;
    let background = GaussianScene::new(
        full_bg.iter().map(|(p, n, c)| make(*p, n, bg_sigma, *c)).collect(),
    );

    // Rotate cameras and object frames onto the requested up axis.
    let frames: Vec<CameraFrame> = build_cams
        .iter()
        .map(|c| {
            CameraFrame::new(
                c.rotation() * up_rotation.transpose(),
                *c.translation(),
                [c.fx, c.fy, c.cx, c.cy],
                c.width,
                c.height,
                c.frame_index,
            )
        })
        .collect::<Result<_>>()?;
    let trajectory = Trajectory::new(frames)?;

    let mut synth = SynthScene {
        spec: spec.clone(),
        scene,
        background,
        trajectory,
        masks: Vec::new(),
        planes,
        objects,
        up_rotation,
    };

    for o in synth.objects.iter_mut() {
        o.rotation = up_rotation * o.rotation;
        o.center = up_rotation * o.center;
    }
    let per_frame: Vec<Vec<Mask>> = synth
        .trajectory
        .frames()
        .iter()
        .map(|cam| silhouettes(&synth, cam))
        .collect();
    let mut masks = Vec::new();
    for (k, o) in synth.objects.iter().enumerate() {
        let mut by_frame = BTreeMap::new();
        for (cam, frame_masks) in synth.trajectory.frames().iter().zip(&per_frame) {
            by_frame.insert(cam.frame_index, frame_masks[k].clone());
        }
        let stack = MaskStack::new(o.id, by_frame)?;
        if stack.view_set().len() < 3 {
            return Err(Error::Config(format!(
                "object `{}` is visible in only {} frames; at least 3 are required",
                o.name,
                stack.view_set().len()
            )));
        }
        masks.push(stack);
    }
    synth.masks = masks;
    Ok(synth)
}

/// Write the generator outputs: scene PLY, trajectory, masks and oracle metadata.
pub fn write_outputs(synth: &SynthScene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::scene::ply::save_scene(&synth.scene, &dir.join("scene.ply"))?;
    crate::scene::ply::save_scene(&synth.background, &dir.join("background_gt.ply"))?;
    synth.trajectory.save(&dir.join("trajectory.json"))?;
    for stack in &synth.masks {
        stack.save(&dir.join("masks"))?;
    }
    let meta = serde_json::json!({
        "spec": synth.spec,
        "up": [synth.up().x, synth.up().y, synth.up().z],
        "planes": synth.planes,
        "objects": synth.objects,
    });
    let path = dir.join("oracle.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}


/// Rebuild the generator state behind a written `oracle.json` by running the
/// recorded spec again; the mock backends answer from it.
pub fn load_oracle(path: &Path) -> Result<SynthScene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let spec = value
        .get("spec")
        .ok_or_else(|| Error::Format(format!("{}: no `spec` entry", path.display())))?;
    generate(&serde_json::from_value(spec.clone())?)
}
