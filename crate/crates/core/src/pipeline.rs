//! Stage orchestration: decompose → restore → assemble, each reading the
//! previous stage's manifest and writing its own under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::agent::{run_agent, CallLog, EntryState};
use crate::assemble::{assemble_scene, place_object, AlignView, CollisionRef, PlacedObject, ReferenceView, MANIFEST_FILE};
use crate::assets::{generate_asset, ObjectAsset};
use crate::backend::{bounded_map, AssetRequest, BackendKind, Backends};
use crate::collision::{build_proxy, CollisionMesh, ProxyReport};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};
use crate::render::render;
use crate::restore::{fuse_masks, inpaint_background, reinit_gaussians};
use crate::scene::ply::{load_scene, save_scene};
use crate::scene::{split_by_labels, GaussianScene, Label, Trajectory};
use crate::segment::{assign_objects, optimize_assignment, MaskStack, WeightCache};
use crate::synth::load_oracle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decompose,
    Restore,
    Assemble,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Decompose, Stage::Restore, Stage::Assemble];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Decompose => "decompose",
            Stage::Restore => "restore",
            Stage::Assemble => "assemble",
        }
    }

    /// The manifest whose presence marks the stage complete.
    pub fn manifest(self, out: &Path) -> PathBuf {
        let dir = out.join(self.name());
        match self {
            Stage::Decompose => dir.join(DECOMPOSE_MANIFEST),
            Stage::Restore => dir.join(RESTORE_MANIFEST),
            Stage::Assemble => dir.join(MANIFEST_FILE),
        }
    }
}

pub const DECOMPOSE_MANIFEST: &str = "decompose.manifest.json";
pub const RESTORE_MANIFEST: &str = "restore.manifest.json";
pub const RUN_RECORD: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposedObject {
    pub object_id: Label,
    pub name: String,
    pub best_view: u32,
    /// Mask directory and Gaussian subset, relative to the manifest.
    pub masks: String,
    pub gaussians: String,
    pub primitives: usize,
    pub view_set: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeManifest {
    pub format: String,
    pub config_hash: String,
    pub scene: PathBuf,
    pub trajectory: PathBuf,
    pub labeled_scene: String,
    pub agent: String,
    pub objects: Vec<DecomposedObject>,
    /// Prompts whose Gaussian set came out empty.
    pub dropped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoredAsset {
    pub object_id: Label,
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreManifest {
    pub format: String,
    pub config_hash: String,
    pub decompose: String,
    pub background: String,
    pub added_gaussians: usize,
    pub keyframes: Vec<u32>,
    pub keyframe_spacing: usize,
    pub dilation_radius: usize,
    pub collision: CollisionRef,
    pub proxy: ProxyReport,
    pub assets: Vec<RestoredAsset>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    /// Skipped because a matching manifest already existed.
    Resumed,
    Disabled,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub total_seconds: f64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn rel(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

pub fn render_frames(scene: &GaussianScene, traj: &Trajectory, cfg: &PipelineConfig) -> BTreeMap<u32, RgbImage> {
    traj.frames()
        .iter()
        .map(|c| (c.frame_index, render(scene, c, &cfg.render).color))
        .collect()
}

/// Backends for a run; the mocks regenerate the synthetic scene they answer from.
pub fn build_backends(cfg: &PipelineConfig) -> Result<Backends> {
    let oracle = if cfg.needs_oracle() {
        let path = cfg
            .oracle_path()
            .ok_or_else(|| Error::Config("mock backends need paths.oracle".into()))?;
        Some(Arc::new(load_oracle(&path)?))
    } else {
        None
    };
    Backends::from_config(&cfg.backends, oracle)
}

fn unlabeled(mut scene: GaussianScene) -> Result<GaussianScene> {
    let n = scene.len();
    scene.set_labels(vec![0; n])?;
    Ok(scene)
}

pub fn run_decompose(cfg: &PipelineConfig, backends: &Backends) -> Result<DecomposeManifest> {
    let dir = cfg.paths.output.join(Stage::Decompose.name());
    fresh_dir(&dir)?;
    // labels in the input are ignored: decomposition starts from nothing
    let scene = unlabeled(load_scene(&cfg.paths.scene)?)?;
    if scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    let traj = Trajectory::load(&cfg.paths.trajectory)?;
    let frames = render_frames(&scene, &traj, cfg);

    let log = CallLog::default();
    let agent = run_agent(&frames, &traj, backends, &cfg.agent, &log);
    write_atomic(&dir.join("agent.log.jsonl"), log.to_jsonl()?.as_bytes())?;
    let agent = agent?;
    write_json(&dir.join("agent.json"), &agent)?;

    let seg = cfg.segmentation_effective();
    let cache = WeightCache::build(&scene, &traj, &cfg.render);
    let mut fields = Vec::new();
    for stack in &agent.masks {
        fields.push(optimize_assignment(&cache, stack, &seg)?);
        stack.save(&dir.join("masks"))?;
    }
    let labeled = assign_objects(&scene, &fields, &seg)?;
    save_scene(&labeled, &dir.join("labeled.ply"))?;

    let split = split_by_labels(&labeled);
    let mut objects = Vec::new();
    let mut dropped = Vec::new();
    std::fs::create_dir_all(dir.join("objects")).map_err(|e| Error::io(dir.join("objects"), e))?;
    for (obj, stack) in agent.objects.iter().zip(&agent.masks) {
        let Some((_, members, subset)) = split.objects.iter().find(|o| o.0 == obj.object_id) else {
            log::warn!("object `{}` received no Gaussians; dropped", obj.prompt);
            dropped.push(obj.prompt.clone());
            continue;
        };
        let gaussians = format!("objects/obj_{:03}.ply", obj.object_id);
        save_scene(subset, &dir.join(&gaussians))?;
        objects.push(DecomposedObject {
            object_id: obj.object_id,
            name: obj.prompt.clone(),
            best_view: obj.best_view,
            masks: rel(&MaskStack::object_dir(Path::new("masks"), obj.object_id)),
            gaussians,
            primitives: members.len(),
            view_set: stack.view_set(),
        });
    }
    let manifest = DecomposeManifest {
        format: "worldact.decompose/1".into(),
        config_hash: cfg.hash(),
        scene: cfg.paths.scene.clone(),
        trajectory: cfg.paths.trajectory.clone(),
        labeled_scene: "labeled.ply".into(),
        agent: "agent.json".into(),
        objects,
        dropped,
    };
    write_json(&Stage::Decompose.manifest(&cfg.paths.output), &manifest)?;
    Ok(manifest)
}

fn load_masks(decompose_dir: &Path, objects: &[DecomposedObject]) -> Result<Vec<MaskStack>> {
    objects
        .iter()
        .map(|o| MaskStack::load(&decompose_dir.join("masks"), o.object_id))
        .collect()
}

fn provenance(kind: &BackendKind) -> String {
    match kind {
        BackendKind::Mock => "mock".into(),
        BackendKind::Http(url) => url.clone(),
    }
}

pub fn run_restore(cfg: &PipelineConfig, backends: &Backends) -> Result<RestoreManifest> {
    let out = &cfg.paths.output;
    let dm_path = Stage::Decompose.manifest(out);
    let dm: DecomposeManifest = read_json(&dm_path)?;
    let ddir = dm_path.parent().expect("manifest has a directory");
    let dir = out.join(Stage::Restore.name());
    fresh_dir(&dir)?;

    let labeled = load_scene(&ddir.join(&dm.labeled_scene))?;
    let traj = Trajectory::load(&dm.trajectory)?;
    let frames = render_frames(&labeled, &traj, cfg);
    let stacks = load_masks(ddir, &dm.objects)?;
    let background = split_by_labels(&labeled).background;

    let (completed, keyframes) = if labeled.labels().iter().any(|&l| l != 0) {
        let masks = fuse_masks(&labeled, &traj, cfg.restore.dilation_radius, &cfg.render)?;
        let inpainted = inpaint_background(
            &frames,
            &masks,
            backends.inpainter.as_ref(),
            backends.depth.as_ref(),
            cfg.restore.keyframe_spacing,
            backends.max_in_flight,
        )?;
        let completed = reinit_gaussians(&inpainted, &masks, &traj, &background, &cfg.restore, &cfg.render)?;
        (completed, inpainted.keyframes)
    } else {
        (background.clone(), Vec::new())
    };
    save_scene(&completed, &dir.join("background.ply"))?;

    let (proxy, report) = build_proxy(&completed, &cfg.collision_effective())?;
    proxy.save(&dir, "collision")?;

    let assets_dir = dir.join("assets");
    let jobs: Vec<(&DecomposedObject, &MaskStack)> = dm.objects.iter().zip(&stacks).collect();
    let generated = bounded_map(&jobs, backends.max_in_flight, |(obj, stack)| {
        let cam = traj
            .get(obj.best_view)
            .ok_or_else(|| Error::Data(format!("best view {} has no camera", obj.best_view)))?;
        let mask = stack
            .get(obj.best_view)
            .ok_or_else(|| Error::Data(format!("object {}: no mask in its best view", obj.object_id)))?;
        let request = AssetRequest {
            object_id: obj.object_id,
            frame: obj.best_view,
            rgb: frames[&obj.best_view].clone(),
            mask: mask.clone(),
            depth: render(&labeled, cam, &cfg.render).depth,
            camera: cam.clone(),
            up: cfg.up,
        };
        generate_asset(&request, backends.asset.as_ref(), &provenance(&cfg.backends.asset))
    })?;
    let mut assets = Vec::new();
    for a in &generated {
        let d = a.save(&assets_dir)?;
        assets.push(RestoredAsset {
            object_id: a.object_id,
            dir: rel(d.strip_prefix(&dir).unwrap_or(&d)),
        });
    }
    // the inventory advances to its final state once assets exist
    let mut agent: crate::agent::AgentOutput = read_json(&ddir.join(&dm.agent))?;
    for e in agent.inventory.iter_mut() {
        if dm.objects.iter().any(|o| o.name == e.name) && e.state == EntryState::Scored {
            e.advance(EntryState::Generated)?;
        }
    }
    write_json(&dir.join("inventory.json"), &agent.inventory)?;

    let manifest = RestoreManifest {
        format: "worldact.restore/1".into(),
        config_hash: cfg.hash(),
        decompose: format!("../{}/{}", Stage::Decompose.name(), DECOMPOSE_MANIFEST),
        background: "background.ply".into(),
        added_gaussians: completed.len() - background.len(),
        keyframes,
        keyframe_spacing: cfg.restore.keyframe_spacing,
        dilation_radius: cfg.restore.dilation_radius,
        collision: CollisionRef {
            obj: "collision.obj".into(),
            meta: "collision.meta.json".into(),
        },
        proxy: report,
        assets,
    };
    write_json(&Stage::Restore.manifest(out), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub object_id: Label,
    pub candidates: Vec<CandidateRecord>,
    pub chosen: usize,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub settle_lift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub yaw_deg: f64,
    pub flipped: bool,
    pub residual: f64,
    pub similarity: f64,
}

pub fn run_assemble(cfg: &PipelineConfig, backends: &Backends) -> Result<crate::assemble::SceneManifest> {
    let out = &cfg.paths.output;
    let rm_path = Stage::Restore.manifest(out);
    let rm: RestoreManifest = read_json(&rm_path)?;
    let rdir = rm_path.parent().expect("manifest has a directory");
    let dm_path = rdir.join(&rm.decompose);
    let dm: DecomposeManifest = read_json(&dm_path)?;
    let ddir = dm_path.parent().expect("manifest has a directory");
    let dir = out.join(Stage::Assemble.name());
    fresh_dir(&dir)?;

    let labeled = load_scene(&ddir.join(&dm.labeled_scene))?;
    let traj = Trajectory::load(&dm.trajectory)?;
    let frames = render_frames(&labeled, &traj, cfg);
    let stacks = load_masks(ddir, &dm.objects)?;
    let background = load_scene(&rdir.join(&rm.background))?;
    let proxy = CollisionMesh::load(rdir, "collision")?;
    let up = Vector3::from(cfg.up).normalize();
    let align = cfg.align_effective();

    let mut placed: Vec<PlacedObject> = Vec::new();
    let mut world_meshes: Vec<CollisionMesh> = Vec::new();
    let mut records = Vec::new();
    for (k, obj) in dm.objects.iter().enumerate() {
        let asset_dir = rm
            .assets
            .iter()
            .find(|a| a.object_id == obj.object_id)
            .ok_or_else(|| Error::Data(format!("object {} has no asset", obj.object_id)))?;
        let root = rdir.join(&asset_dir.dir);
        let asset = ObjectAsset::load(root.parent().unwrap_or(rdir), obj.object_id)?;
        let stack = &stacks[k];
        let views: Vec<AlignView> = traj
            .frames()
            .iter()
            .filter_map(|cam| {
                let m = stack.get(cam.frame_index).filter(|m| m.any())?;
                let mut ignore = Mask::filled(m.width(), m.height(), false);
                for (j, other) in stacks.iter().enumerate() {
                    if j != k {
                        if let Some(o) = other.get(cam.frame_index) {
                            ignore.union_with(o);
                        }
                    }
                }
                Some(AlignView::from_mask(cam.clone(), m, Some(ignore)))
            })
            .collect();
        let anchor: Vec<Vector3<f64>> = labeled
            .primitives()
            .iter()
            .zip(labeled.labels())
            .filter(|(_, &l)| l == obj.object_id)
            .map(|(p, _)| p.center())
            .collect();
        let cam = traj
            .get(obj.best_view)
            .ok_or_else(|| Error::Data(format!("best view {} has no camera", obj.best_view)))?;
        let reference = ReferenceView {
            camera: cam,
            rgb: &frames[&obj.best_view],
            mask: stack
                .get(obj.best_view)
                .ok_or_else(|| Error::Data(format!("object {}: no mask in its best view", obj.object_id)))?,
        };
        let mut obstacles: Vec<&CollisionMesh> = vec![&proxy];
        obstacles.extend(world_meshes.iter());
        let placement = place_object(
            &asset,
            &anchor,
            &reference,
            &views,
            &obstacles,
            up,
            backends.embedder.as_ref(),
            &align,
        )?;
        records.push(PlacementRecord {
            object_id: obj.object_id,
            candidates: placement
                .candidates
                .iter()
                .zip(&placement.similarities)
                .map(|(c, &s)| CandidateRecord {
                    yaw_deg: c.yaw_deg,
                    flipped: c.flipped,
                    residual: c.residual,
                    similarity: s,
                })
                .collect(),
            chosen: placement.chosen,
            iterations: placement.report.iterations,
            history: placement.report.history.clone(),
            settle_lift: placement.report.settle_lift,
        });
        let p = PlacedObject {
            asset,
            name: obj.name.clone(),
            pose: placement.report.pose,
            final_loss: Some(placement.report.final_loss),
            scale_clamped: placement.report.scale_clamped,
        };
        world_meshes.push(p.world_mesh()?);
        placed.push(p);
    }
    let manifest = assemble_scene(&dir, &background, &proxy, &placed, up, cfg.snapshot())?;
    write_json(&dir.join("placements.json"), &records)?;
    Ok(manifest)
}

/// What to run and how.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub command: String,
    pub stages: Vec<Stage>,
    /// Skip stages whose manifest exists and matches the config hash.
    pub resume: bool,
}

impl RunOptions {
    pub fn pipeline(cfg: &PipelineConfig, resume: bool) -> Self {
        let t = cfg.stages;
        let stages = Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::Decompose => t.decompose,
                Stage::Restore => t.restore,
                Stage::Assemble => t.assemble,
            })
            .collect();
        Self {
            command: "pipeline".into(),
            stages,
            resume,
        }
    }

    pub fn single(stage: Stage, resume: bool) -> Self {
        Self {
            command: stage.name().into(),
            stages: vec![stage],
            resume,
        }
    }
}

fn manifest_hash(stage: Stage, out: &Path) -> Option<String> {
    let path = stage.manifest(out);
    let v: serde_json::Value = read_json(&path).ok()?;
    match stage {
        Stage::Assemble => v.pointer("/parameters").map(|p| {
            let text = serde_json::to_string(p).unwrap_or_default();
            hex::encode(sha2::Sha256::digest(text.as_bytes()))
        }),
        _ => v.get("config_hash")?.as_str().map(String::from),
    }
}

fn stage_is_current(stage: Stage, cfg: &PipelineConfig) -> bool {
    let want = match stage {
        Stage::Assemble => {
            let text = serde_json::to_string(&cfg.snapshot()).unwrap_or_default();
            hex::encode(sha2::Sha256::digest(text.as_bytes()))
        }
        _ => cfg.hash(),
    };
    manifest_hash(stage, &cfg.paths.output).as_deref() == Some(want.as_str())
}

use sha2::Digest as _;

/// Run the requested stages in order, stopping at the first failure. A
/// `run.json` describing the run is written in every case.
pub fn run(cfg: &PipelineConfig, opts: &RunOptions) -> (RunRecord, Result<()>) {
    let start = Instant::now();
    let mut record = RunRecord {
        version: env!("CARGO_PKG_VERSION").into(),
        command: opts.command.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.snapshot(),
        stages: Vec::new(),
        total_seconds: 0.0,
    };
    let result = run_stages(cfg, opts, &mut record);
    record.total_seconds = start.elapsed().as_secs_f64();
    let out = &cfg.paths.output;
    let written = std::fs::create_dir_all(out)
        .map_err(|e| Error::io(out, e))
        .and_then(|_| write_json(&out.join(RUN_RECORD), &record));
    let result = result.and(written);
    (record, result)
}

fn run_stages(cfg: &PipelineConfig, opts: &RunOptions, record: &mut RunRecord) -> Result<()> {
    let first = opts.stages.first().copied();
    if first == Some(Stage::Decompose) {
        cfg.validate()?;
    } else {
        cfg.validate_parameters()?;
    }
    std::fs::create_dir_all(&cfg.paths.output).map_err(|e| Error::io(&cfg.paths.output, e))?;
    let mut backends: Option<Backends> = None;
    for stage in Stage::ALL {
        if !opts.stages.contains(&stage) {
            if opts.command == "pipeline" {
                record.stages.push(StageRecord {
                    stage,
                    status: StageStatus::Disabled,
                    seconds: 0.0,
                    error: None,
                });
            }
            continue;
        }
        if opts.resume && stage_is_current(stage, cfg) {
            log::info!("{}: manifest matches the configuration, skipping", stage.name());
            record.stages.push(StageRecord {
                stage,
                status: StageStatus::Resumed,
                seconds: 0.0,
                error: None,
            });
            continue;
        }
        if stage != Stage::Decompose {
            let prev = Stage::ALL[stage as usize - 1];
            if !prev.manifest(&cfg.paths.output).is_file() {
                let e = Error::Data(format!(
                    "no {} manifest under {}; run that stage first",
                    prev.name(),
                    cfg.paths.output.display()
                ));
                return Err(fail(record, stage, 0.0, e));
            }
        }
        let t = Instant::now();
        if backends.is_none() {
            backends = Some(build_backends(cfg).map_err(|e| fail(record, stage, 0.0, e))?);
        }
        let b = backends.as_ref().expect("just built");
        log::info!("{}: running", stage.name());
        let res = match stage {
            Stage::Decompose => run_decompose(cfg, b).map(|_| ()),
            Stage::Restore => run_restore(cfg, b).map(|_| ()),
            Stage::Assemble => run_assemble(cfg, b).map(|_| ()),
        };
        let seconds = t.elapsed().as_secs_f64();
        if let Err(e) = res {
            return Err(fail(record, stage, seconds, e));
        }
        log::info!("{}: done in {seconds:.1} s", stage.name());
        record.stages.push(StageRecord {
            stage,
            status: StageStatus::Completed,
            seconds,
            error: None,
        });
    }
    Ok(())
}

fn fail(record: &mut RunRecord, stage: Stage, seconds: f64, e: Error) -> Error {
    let e = e.in_stage(stage.name());
    record.stages.push(StageRecord {
        stage,
        status: StageStatus::Failed,
        seconds,
        error: Some(e.to_string()),
    });
    e
}
