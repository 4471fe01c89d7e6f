//! Placing generated assets back into the restored scene.

pub mod align;
pub mod icp;
pub mod pose;

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use align::{loss_gradient, refine_pose, select_pose, AlignConfig, AlignProblem, AlignView, LossComponents, RefineReport};
pub use icp::{best_by_residual, icp_candidates, umeyama, IcpCandidate, IcpConfig};
pub use pose::{r6_to_rotation, rotation_angle_deg, PlacementPose};

use crate::assets::ObjectAsset;
use crate::backend::Embedder;
use crate::collision::CollisionMesh;
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};
use crate::render::{render, RenderOptions, RenderedFrame};
use crate::scene::ply::{load_scene, save_scene};
use crate::scene::{CameraFrame, GaussianScene, Label};

pub const MANIFEST_FILE: &str = "scene.manifest.json";
const MANIFEST_FORMAT: &str = "worldact.scene/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionRef {
    pub obj: String,
    pub meta: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestObject {
    pub object_id: Label,
    pub name: String,
    /// Canonical-frame assets, relative to the manifest.
    pub gaussians: String,
    pub mesh: String,
    /// Rigid part of the placement, row-major.
    pub pose: [[f64; 4]; 4],
    pub scale: f64,
    pub source_view: u32,
    pub provenance: String,
    pub final_loss: Option<LossComponents>,
    pub scale_clamped: bool,
}

/// Everything needed to rebuild the assembled scene; paths are relative to
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub format: String,
    pub up: [f64; 3],
    pub background: String,
    pub collision: CollisionRef,
    pub objects: Vec<ManifestObject>,
    /// Settings the scene was produced with.
    pub parameters: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct PlacedObject {
    pub asset: ObjectAsset,
    pub name: String,
    pub pose: PlacementPose,
    pub final_loss: Option<LossComponents>,
    pub scale_clamped: bool,
}

impl PlacedObject {
    pub fn world_mesh(&self) -> Result<CollisionMesh> {
        let mut m = self.asset.mesh.clone();
        m.vertices = self.pose.transform_points(&m.vertices)?;
        Ok(m)
    }

    pub fn world_gaussians(&self) -> Result<GaussianScene> {
        place_gaussians(&self.asset.gaussians, &self.pose, self.asset.object_id)
    }
}

fn place_gaussians(g: &GaussianScene, pose: &PlacementPose, label: Label) -> Result<GaussianScene> {
    let mut placed = g.transformed(&pose.quaternion()?, &pose.t(), pose.scale);
    placed.set_labels(vec![label; placed.len()])?;
    Ok(placed)
}

/// Write the background, collision proxy and placed assets under `dir`
/// together with `scene.manifest.json`.
pub fn assemble_scene(
    dir: &Path,
    background: &GaussianScene,
    collision: &CollisionMesh,
    objects: &[PlacedObject],
    up: Vector3<f64>,
    parameters: serde_json::Value,
) -> Result<SceneManifest> {
    if background.is_empty() {
        return Err(Error::Argument("assemble: background is empty".into()));
    }
    if collision.faces.is_empty() {
        return Err(Error::Argument("assemble: collision proxy is empty".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_scene(background, &dir.join("background.ply"))?;
    collision.save(dir, "collision")?;
    let mut entries = Vec::new();
    for o in objects {
        o.pose.validate()?;
        let rel = format!("objects/obj_{:03}", o.asset.object_id);
        let sub = dir.join(&rel);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        save_scene(&o.asset.gaussians, &sub.join("gaussians.ply"))?;
        let obj = sub.join("mesh.obj");
        std::fs::write(&obj, o.asset.mesh.to_obj()).map_err(|e| Error::io(&obj, e))?;
        entries.push(ManifestObject {
            object_id: o.asset.object_id,
            name: o.name.clone(),
            gaussians: format!("{rel}/gaussians.ply"),
            mesh: format!("{rel}/mesh.obj"),
            pose: o.pose.matrix()?,
            scale: o.pose.scale,
            source_view: o.asset.source_view,
            provenance: o.asset.provenance.clone(),
            final_loss: o.final_loss,
            scale_clamped: o.scale_clamped,
        });
    }
    let manifest = SceneManifest {
        format: MANIFEST_FORMAT.into(),
        up: up.into(),
        background: "background.ply".into(),
        collision: CollisionRef {
            obj: "collision.obj".into(),
            meta: "collision.meta.json".into(),
        },
        objects: entries,
        parameters,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl SceneManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("unknown manifest format `{}`", m.format)));
        }
        Ok(m)
    }

    /// Background plus every placed object, labelled by object id.
    pub fn compose(&self, dir: &Path) -> Result<GaussianScene> {
        let mut scene = load_scene(&dir.join(&self.background))?;
        scene.set_labels(vec![0; scene.len()])?;
        for o in &self.objects {
            let g = load_scene(&dir.join(&o.gaussians))?;
            let pose = PlacementPose::from_matrix(&o.pose, o.scale)?;
            scene.extend(&place_gaussians(&g, &pose, o.object_id)?);
        }
        Ok(scene)
    }

    pub fn collision(&self, dir: &Path) -> Result<CollisionMesh> {
        let obj = dir.join(&self.collision.obj);
        let stem = obj
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format("collision path has no file name".into()))?;
        CollisionMesh::load(obj.parent().unwrap_or(dir), stem)
    }
}

/// Composite render of an assembled scene from its manifest alone.
pub fn render_manifest(path: &Path, cam: &CameraFrame, opts: &RenderOptions) -> Result<RenderedFrame> {
    let manifest = SceneManifest::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(render(&manifest.compose(dir)?, cam, opts))
}

/// The view used to choose between ICP hypotheses by appearance.
pub struct ReferenceView<'a> {
    pub camera: &'a CameraFrame,
    pub rgb: &'a RgbImage,
    pub mask: &'a Mask,
}

#[derive(Clone, Debug)]
pub struct Placement {
    pub candidates: Vec<IcpCandidate>,
    pub similarities: Vec<f64>,
    pub chosen: usize,
    pub report: RefineReport,
}

/// Coarse-to-fine placement of one asset: ICP hypotheses against the
/// observed object points, appearance-based choice, then refinement
/// against the masks, the support plane and `obstacles`.
#[allow(clippy::too_many_arguments)]
pub fn place_object(
    asset: &ObjectAsset,
    anchor: &[Vector3<f64>],
    reference: &ReferenceView,
    views: &[AlignView],
    obstacles: &[&CollisionMesh],
    up: Vector3<f64>,
    embedder: &dyn Embedder,
    cfg: &AlignConfig,
) -> Result<Placement> {
    let surface = asset.mesh.sample_surface(cfg.surface_samples, cfg.sample_seed);
    let icp_points = asset.mesh.sample_surface(4 * cfg.surface_samples, cfg.sample_seed + 1);
    let candidates = icp_candidates(&icp_points, anchor, &up, &cfg.icp)?;
    let (chosen, similarities) = select_pose(
        &candidates,
        &asset.gaussians,
        reference.camera,
        reference.rgb,
        reference.mask,
        embedder,
    )?;
    let init = candidates[chosen].pose;
    let problem = AlignProblem::new(&asset.gaussians, surface, obstacles, views, up, &init, cfg)?;
    let report = refine_pose(&init, &problem)?;
    Ok(Placement {
        candidates,
        similarities,
        chosen,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::box_mesh;
    use crate::scene::GaussianPrimitive;
    use nalgebra::Rotation3;

    fn background() -> GaussianScene {
        let prims = (0..40)
            .map(|i| {
                let a = i as f64 * 0.3;
                GaussianPrimitive::isotropic(Vector3::new(a.cos() * 2.0, (i % 5) as f64 * 0.3, a.sin() * 2.0), 0.2, 0.9, [0.5, 0.4, 0.3])
            })
            .collect();
        GaussianScene::new(prims)
    }

    fn asset(id: Label) -> ObjectAsset {
        let prims = (0..30)
            .map(|i| {
                let p = Vector3::new((i % 3) as f64 - 1.0, ((i / 3) % 5) as f64 - 2.0, (i / 15) as f64) * 0.2;
                GaussianPrimitive::isotropic(p, 0.08, 0.95, [0.1 * (i % 7) as f64, 0.8, 0.2])
            })
            .collect();
        ObjectAsset {
            object_id: id,
            gaussians: GaussianScene::new(prims),
            mesh: box_mesh(Vector3::repeat(-0.5), Vector3::repeat(0.5)),
            source_view: 3,
            provenance: "mock".into(),
            scale: 0.7,
            backend_pose: None,
        }
    }

    fn camera() -> CameraFrame {
        CameraFrame::look_at(Vector3::new(0.3, 1.0, 1.5), Vector3::new(0.0, 0.3, 0.0), Vector3::y(), 70.0, 40, 32, 0).unwrap()
    }

    #[test]
    fn empty_assembly_is_background_only() {
        let dir = tempfile::tempdir().unwrap();
        let proxy = box_mesh(Vector3::repeat(-3.0), Vector3::repeat(3.0));
        let m = assemble_scene(dir.path(), &background(), &proxy, &[], Vector3::y(), serde_json::json!({})).unwrap();
        assert!(m.objects.is_empty());
        let loaded = SceneManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.compose(dir.path()).unwrap().len(), background().len());
        assert_eq!(loaded.collision(dir.path()).unwrap().faces, proxy.faces);
    }

    #[test]
    fn manifest_render_matches_direct_render() {
        let dir = tempfile::tempdir().unwrap();
        let r = Rotation3::from_euler_angles(0.1, 0.7, -0.2).into_inner();
        let placed = vec![
            PlacedObject {
                asset: asset(1),
                name: "crate".into(),
                pose: PlacementPose::new(&r, Vector3::new(0.2, 0.3, -0.1), 0.61),
                final_loss: Some(LossComponents::default()),
                scale_clamped: false,
            },
            PlacedObject {
                asset: asset(2),
                name: "jar".into(),
                pose: PlacementPose::new(&Rotation3::from_axis_angle(&Vector3::y_axis(), 1.3).into_inner(), Vector3::new(-0.4, 0.2, 0.3), 0.4),
                final_loss: None,
                scale_clamped: true,
            },
        ];
        let bg = background();
        let proxy = box_mesh(Vector3::repeat(-3.0), Vector3::repeat(3.0));
        let params = serde_json::json!({"contact_weight": 0.1, "seed": 7});
        let m = assemble_scene(dir.path(), &bg, &proxy, &placed, Vector3::y(), params).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        assert_eq!(SceneManifest::load(&path).unwrap(), m);

        let mut direct = bg.clone();
        for p in &placed {
            direct.extend(&p.world_gaussians().unwrap());
        }
        let opts = RenderOptions::default();
        let a = render(&direct, &camera(), &opts);
        let b = render_manifest(&path, &camera(), &opts).unwrap();
        let diff = a
            .color
            .data()
            .iter()
            .zip(b.color.data())
            .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).abs()))
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{diff}");
        let composed = m.compose(dir.path()).unwrap();
        assert_eq!(composed.object_ids(), vec![1, 2]);
    }

}
