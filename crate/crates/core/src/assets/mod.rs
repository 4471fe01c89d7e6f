//! Clean per-object assets from a single best view.

pub mod hull;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::backend::{bounded_map, AssetGenerator, AssetRequest, Vlm, VlmRequest, VlmTask};
use crate::collision::CollisionMesh;
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::scene::ply::{load_scene, save_scene};
use crate::scene::{Aabb, GaussianScene, Label};
use crate::segment::MaskStack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub object_id: Label,
    pub frame_index: u32,
    pub score: i64,
    pub rationale: String,
}

/// An object in its canonical frame: volume centroid at the origin, largest
/// bounding-box side 1, +y up.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAsset {
    pub object_id: Label,
    pub gaussians: GaussianScene,
    pub mesh: CollisionMesh,
    pub source_view: u32,
    pub provenance: String,
    /// Generator units per canonical unit.
    pub scale: f64,
    /// Pose the generator predicted, if any; informational only.
    pub backend_pose: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssetRecord {
    object_id: Label,
    source_view: u32,
    provenance: String,
    scale: f64,
    backend_pose: Option<Vec<f64>>,
}

impl ObjectAsset {
    pub fn dir(root: &Path, object_id: Label) -> PathBuf {
        root.join(format!("obj_{object_id:03}"))
    }

    /// Write `gaussians.ply`, `mesh.obj` and `asset.json` under `obj_{m:03}/`.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let dir = Self::dir(root, self.object_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_scene(&self.gaussians, &dir.join("gaussians.ply"))?;
        let obj = dir.join("mesh.obj");
        std::fs::write(&obj, self.mesh.to_obj()).map_err(|e| Error::io(&obj, e))?;
        let rec = AssetRecord {
            object_id: self.object_id,
            source_view: self.source_view,
            provenance: self.provenance.clone(),
            scale: self.scale,
            backend_pose: self.backend_pose.clone(),
        };
        let meta = dir.join("asset.json");
        std::fs::write(&meta, serde_json::to_string_pretty(&rec)?).map_err(|e| Error::io(&meta, e))?;
        Ok(dir)
    }

    pub fn load(root: &Path, object_id: Label) -> Result<Self> {
        let dir = Self::dir(root, object_id);
        let meta = dir.join("asset.json");
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let rec: AssetRecord = serde_json::from_str(&text)?;
        let obj = dir.join("mesh.obj");
        let mesh_text = std::fs::read_to_string(&obj).map_err(|e| Error::io(&obj, e))?;
        Ok(Self {
            object_id: rec.object_id,
            gaussians: load_scene(&dir.join("gaussians.ply"))?,
            mesh: CollisionMesh::from_obj(&mesh_text)?,
            source_view: rec.source_view,
            provenance: rec.provenance,
            scale: rec.scale,
            backend_pose: rec.backend_pose,
        })
    }
}

const SCORE_PROMPT: &str = "You are rating views of one object for single-image 3D reconstruction. \
The first image is the frame, the second the object's mask. Judge completeness (is the whole object \
visible and unoccluded), clarity (size and sharpness) and centeredness (not cut by the frame border). \
Answer with JSON only: {\"score\": <integer 0-100>, \"rationale\": <one short sentence>}.";

/// Ask the VLM to rate every frame where the object's mask is nonempty.
pub fn score_views(
    masks: &MaskStack,
    frames: &BTreeMap<u32, RgbImage>,
    vlm: &dyn Vlm,
    max_in_flight: usize,
) -> Result<Vec<ViewScore>> {
    let views = masks.view_set();
    if views.is_empty() {
        return Err(Error::Argument(format!("object {} has no nonempty mask", masks.object_id)));
    }
    bounded_map(&views, max_in_flight, |&f| {
        let rgb = frames
            .get(&f)
            .ok_or_else(|| Error::Data(format!("no frame {f} to score")))?;
        let mask = masks.get(f).expect("view set comes from the stack");
        let request = VlmRequest {
            task: VlmTask::ScoreView,
            prompt: SCORE_PROMPT.into(),
            frames: vec![f],
            images: vec![rgb.clone(), mask.map(|&m| if m { [1.0; 3] } else { [0.0; 3] })],
        };
        let raw = vlm.complete(&request)?;
        let (score, rationale) = parse_score(&raw)?;
        Ok(ViewScore {
            object_id: masks.object_id,
            frame_index: f,
            score,
            rationale,
        })
    })
}

/// Strict parse of `{"score": int, "rationale": str}`.
pub fn parse_score(raw: &str) -> Result<(i64, String)> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Reply {
        score: i64,
        #[serde(default)]
        rationale: String,
    }
    let reply: Reply = serde_json::from_str(raw).map_err(|e| Error::Protocol {
        message: format!("view score is not the expected JSON: {e}"),
        raw: raw.to_string(),
    })?;
    if !(0..=100).contains(&reply.score) {
        return Err(Error::Protocol {
            message: format!("view score {} outside 0..=100", reply.score),
            raw: raw.to_string(),
        });
    }
    Ok((reply.score, reply.rationale))
}

/// Highest score; ties go to the earliest frame.
pub fn select_best_view(scores: &[ViewScore]) -> Result<u32> {
    scores
        .iter()
        .max_by(|a, b| a.score.cmp(&b.score).then(b.frame_index.cmp(&a.frame_index)))
        .map(|s| s.frame_index)
        .ok_or_else(|| Error::Argument("no view scores to choose from".into()))
}

/// Run the generator on one view and move its output to the canonical frame.
pub fn generate_asset(request: &AssetRequest, backend: &dyn AssetGenerator, provenance: &str) -> Result<ObjectAsset> {
    if !request.mask.any() {
        return Err(Error::Argument(format!("object {}: empty mask", request.object_id)));
    }
    let raw = backend.generate(request)?;
    raw.mesh
        .check_watertight()
        .map_err(|e| Error::Data(format!("object {}: generated mesh is not closed: {e}", request.object_id)))?;
    let (gaussians, mesh, scale) = canonicalize(&raw.gaussians, &raw.mesh)?;
    Ok(ObjectAsset {
        object_id: request.object_id,
        gaussians,
        mesh,
        source_view: request.frame,
        provenance: provenance.to_string(),
        scale,
        backend_pose: raw.pose,
    })
}

/// Centroid of the solid bounded by a closed, outward-wound mesh.
pub fn volume_centroid(mesh: &CollisionMesh) -> Option<Vector3<f64>> {
    let mut vol = 0.0;
    let mut acc = Vector3::zeros();
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.corners(f);
        let v = a.dot(&b.cross(&c)) / 6.0;
        vol += v;
        acc += (a + b + c) * (v / 4.0);
    }
    (vol.abs() > 1e-300).then(|| acc / vol)
}

/// Translate the volume centroid to the origin and scale the largest side to
/// 1. Returns the factor divided out.
pub fn canonicalize(gaussians: &GaussianScene, mesh: &CollisionMesh) -> Result<(GaussianScene, CollisionMesh, f64)> {
    let bbox = Aabb::from_points(&mesh.vertices);
    let side = bbox.extent().max();
    if !(side > 0.0 && side.is_finite()) {
        return Err(Error::Geometry("generated mesh has no extent".into()));
    }
    let center = volume_centroid(mesh).unwrap_or_else(|| bbox.center());
    let inv = 1.0 / side;
    let mut m = mesh.clone();
    for v in m.vertices.iter_mut() {
        *v = (*v - center) * inv;
    }
    let g = gaussians.transformed(&UnitQuaternion::identity(), &(-center * inv), inv);
    Ok((g, m, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockAsset, MockVlm};
    use crate::collision::box_mesh;
    use crate::raster::{Mask, ScalarImage};
    use crate::render::{render, RenderOptions};
    use crate::scene::CameraFrame;
    use crate::synth::{generate, SynthSpec};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn vs(frame: u32, score: i64) -> ViewScore {
        ViewScore {
            object_id: 1,
            frame_index: frame,
            score,
            rationale: String::new(),
        }
    }

    #[test]
    fn best_view_ties_go_to_earliest_frame() {
        assert_eq!(select_best_view(&[vs(4, 80)]).unwrap(), 4);
        assert_eq!(select_best_view(&[vs(2, 50), vs(5, 90), vs(9, 90)]).unwrap(), 5);
        assert_eq!(select_best_view(&[vs(9, 90), vs(5, 90), vs(2, 50)]).unwrap(), 5);
        assert!(matches!(select_best_view(&[]), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn best_view_attains_the_maximum(scores in prop::collection::vec(0i64..=100, 1..30)) {
            let list: Vec<ViewScore> = scores.iter().enumerate().map(|(i, &s)| vs(i as u32 * 3, s)).collect();
            let best = select_best_view(&list).unwrap();
            let max = scores.iter().max().unwrap();
            let hit = list.iter().find(|v| v.frame_index == best).unwrap();
            prop_assert_eq!(hit.score, *max);
            let mut rev = list.clone();
            rev.reverse();
            prop_assert_eq!(select_best_view(&rev).unwrap(), best);
        }
    }

    #[test]
    fn score_replies_are_parsed_strictly() {
        assert_eq!(parse_score(r#"{"score": 42, "rationale": "ok"}"#).unwrap().0, 42);
        assert!(matches!(parse_score("about 40"), Err(Error::Protocol { .. })));
        assert!(matches!(parse_score(r#"{"score": 140}"#), Err(Error::Protocol { .. })));
        assert!(matches!(parse_score(r#"{"score": 4.5}"#), Err(Error::Protocol { .. })));
    }

    #[test]
    fn canonical_frame_is_centred_and_unit() {
        let m = box_mesh(Vector3::new(1.0, 2.0, 3.0), Vector3::new(3.0, 3.0, 3.5));
        let (_, c, s) = canonicalize(&GaussianScene::default(), &m).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        assert!(volume_centroid(&c).unwrap().norm() < 1e-12);
        assert!((c.bbox().extent().max() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mock_best_view_is_the_largest_unclipped_view() {
        let synth = Arc::new(generate(&SynthSpec::default()).unwrap());
        let vlm = MockVlm { oracle: synth.clone() };
        let frames: BTreeMap<u32, RgbImage> = synth
            .trajectory
            .frames()
            .iter()
            .map(|c| (c.frame_index, RgbImage::filled(c.width as usize, c.height as usize, [0.0; 3])))
            .collect();
        for (k, obj) in synth.objects.iter().enumerate() {
            let scores = score_views(&synth.masks[k], &frames, &vlm, 4).unwrap();
            let best = select_best_view(&scores).unwrap();
            // brute force: cast a ray through every pixel of every view and
            // weigh the visible area by the unclipped share of its outline
            let mut oracle_best = (i64::MIN, 0);
            for cam in synth.trajectory.frames() {
                let (w, h) = (cam.width as usize, cam.height as usize);
                let mut vis = vec![false; w * h];
                for p in 0..w * h {
                    vis[p] = synth.first_hit(&cam.center(), &cam.pixel_ray(p / w, p % w)).0 == Some(k);
                }
                let at = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && vis[r as usize * w + c as usize];
                let (mut edges, mut cut) = (0, 0);
                for p in 0..w * h {
                    if !vis[p] {
                        continue;
                    }
                    let (r, c) = ((p / w) as isize, (p % w) as isize);
                    for (rr, cc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
                        let off = rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize;
                        if off || !at(rr, cc) {
                            edges += 1;
                        }
                        if off {
                            cut += 1;
                        }
                    }
                }
                let area = vis.iter().filter(|v| **v).count() as f64 / (w * h) as f64;
                let s = if edges == 0 { 0 } else { (100.0 * area * (1.0 - cut as f64 / edges as f64)).round() as i64 };
                if s > oracle_best.0 {
                    oracle_best = (s, cam.frame_index);
                }
            }
            assert_eq!(best, oracle_best.1, "{}", obj.name);
        }
    }

    #[test]
    fn mock_cube_asset_matches_the_cube() {
        let mut spec = SynthSpec::default();
        spec.objects.truncate(1);
        spec.objects[0].shape = crate::synth::Shape::Box { size: [0.5, 0.5, 0.5] };
        let synth = generate(&spec).unwrap();
        let stack = &synth.masks[0];
        let best = stack.view_set().into_iter().max_by_key(|f| stack.get(*f).unwrap().count()).unwrap();
        let cam = synth.trajectory.get(best).unwrap().clone();
        let frame = render(&synth.scene, &cam, &RenderOptions::default());
        let req = AssetRequest {
            object_id: 1,
            frame: best,
            rgb: frame.color.clone(),
            mask: stack.get(best).unwrap().clone(),
            depth: frame.depth.clone(),
            camera: cam,
            up: [0.0, 1.0, 0.0],
        };
        let raw = MockAsset { cfg: Default::default() }.generate(&req).unwrap();
        raw.mesh.check_watertight().unwrap();
        // the generator frame is gravity-aligned, so the height is directly comparable
        let e = raw.mesh.bbox().extent();
        assert!((e.y - 0.5).abs() <= 0.15 * 0.5, "{e:?}");
        // horizontal footprint of a cube under any yaw lies within [0.5, 0.5√2]
        let diag = (e.x * e.x + e.z * e.z).sqrt();
        assert!(diag >= 0.85 * 0.5 * 2f64.sqrt() && diag <= 1.15 * 1.0, "{e:?}");
        let asset = generate_asset(&req, &MockAsset { cfg: Default::default() }, "mock").unwrap();
        assert!((asset.mesh.bbox().extent().max() - 1.0).abs() < 1e-12);
        let gb = asset.gaussians.bbox();
        let mb = asset.mesh.bbox().scaled(1.2);
        assert!(mb.contains(&Vector3::from(gb.min), 1e-9) && mb.contains(&Vector3::from(gb.max), 1e-9));
    }

    #[test]
    fn empty_mask_is_an_argument_error() {
        let cam = CameraFrame::look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y(), 60.0, 8, 8, 0).unwrap();
        let req = AssetRequest {
            object_id: 1,
            frame: 0,
            rgb: RgbImage::filled(8, 8, [0.0; 3]),
            mask: Mask::filled(8, 8, false),
            depth: ScalarImage::filled(8, 8, 1.0),
            camera: cam,
            up: [0.0, 1.0, 0.0],
        };
        assert!(matches!(
            generate_asset(&req, &MockAsset { cfg: Default::default() }, "mock"),
            Err(Error::Argument(_))
        ));
    }
}
