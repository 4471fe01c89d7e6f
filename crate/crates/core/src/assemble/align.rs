//! Placement refinement against masks, support and collisions.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::icp::{IcpCandidate, IcpConfig};
use super::pose::PlacementPose;
use crate::backend::{cosine_similarity, Embedder};
use crate::collision::{CollisionMesh, MeshSdf, Plane};
use crate::error::{Error, Result};
use crate::raster::{Mask, Rect, RgbImage, ScalarImage};
use crate::render::{render_splats, Rasterizer, RenderOptions, Splat};
use crate::scene::{CameraFrame, GaussianScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub contact_weight: f64,
    pub penetration_weight: f64,
    pub icp: IcpConfig,
    /// Share of the lowest surface samples that should touch the support.
    pub contact_percentile: f64,
    pub surface_samples: usize,
    pub sample_seed: u64,
    /// Allowed scale range relative to the initial scale.
    pub scale_bounds: [f64; 2],
    pub max_iterations: usize,
    /// Stop once an accepted step improves the loss by less than this share.
    pub min_relative_improvement: f64,
    /// Central-difference step in normalised parameters.
    pub fd_step: f64,
    /// Length of the first step in normalised parameters.
    pub initial_step: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Pixels added around each target mask's bounding box.
    pub roi_margin: usize,
    /// Planes within this angle of horizontal can support an object.
    pub support_tolerance_deg: f64,
    /// After descent, lift the object along up until no sample penetrates.
    pub settle: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            contact_weight: 0.1,
            penetration_weight: 1.0,
            icp: IcpConfig::default(),
            contact_percentile: 0.05,
            surface_samples: 400,
            sample_seed: 11,
            scale_bounds: [0.5, 2.0],
            max_iterations: 60,
            min_relative_improvement: 1e-6,
            fd_step: 1e-4,
            initial_step: 0.01,
            armijo: 1e-4,
            max_backtracks: 20,
            roi_margin: 10,
            support_tolerance_deg: 10.0,
            settle: true,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        self.icp.validate()?;
        if !(self.contact_weight >= 0.0 && self.penetration_weight >= 0.0) {
            return Err(Error::Config("align: loss weights must be non-negative".into()));
        }
        if !(self.contact_percentile > 0.0 && self.contact_percentile <= 1.0) {
            return Err(Error::Config("align: contact_percentile must lie in (0, 1]".into()));
        }
        if !(self.scale_bounds[0] > 0.0 && self.scale_bounds[0] <= 1.0 && self.scale_bounds[1] >= 1.0) {
            return Err(Error::Config("align: scale_bounds must bracket 1".into()));
        }
        if !(self.fd_step > 0.0 && self.initial_step > 0.0 && self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::Config("align: fd_step and initial_step must be positive, armijo in (0, 1)".into()));
        }
        if self.surface_samples == 0 {
            return Err(Error::Config("align: surface_samples must be positive".into()));
        }
        Ok(())
    }
}

/// One observation of the object: camera, target silhouette and pixels to
/// disregard (typically other objects that may occlude it).
#[derive(Clone, Debug)]
pub struct AlignView {
    pub camera: CameraFrame,
    /// Target coverage in [0, 1]; binary masks map to 0/1.
    pub target: ScalarImage,
    pub ignore: Option<Mask>,
}

impl AlignView {
    pub fn from_mask(camera: CameraFrame, mask: &Mask, ignore: Option<Mask>) -> Self {
        Self {
            camera,
            target: mask.map(|&m| if m { 1.0 } else { 0.0 }),
            ignore,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mask: f64,
    pub contact: f64,
    pub penetration: f64,
    pub total: f64,
    /// No support plane was found, so the contact term is zero.
    pub contact_skipped: bool,
}

struct PreparedView {
    camera: CameraFrame,
    rect: Rect,
    target: Vec<f64>,
    weight: Vec<f64>,
}

/// Everything the loss needs, prepared once per object.
pub struct AlignProblem {
    splats: Vec<Splat>,
    surface: Vec<Vector3<f64>>,
    views: Vec<PreparedView>,
    sdf: MeshSdf,
    support: Option<Plane>,
    up: Vector3<f64>,
    cfg: AlignConfig,
    render: RenderOptions,
}

impl AlignProblem {
    /// `asset` and `surface` are in the asset's canonical frame. The support
    /// plane is the highest near-horizontal plane of `background` that lies
    /// below the object at `init`.
    pub fn new(
        asset: &GaussianScene,
        surface: Vec<Vector3<f64>>,
        background: &[&CollisionMesh],
        views: &[AlignView],
        up: Vector3<f64>,
        init: &PlacementPose,
        cfg: &AlignConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        init.validate()?;
        if surface.is_empty() {
            return Err(Error::Argument("align: no surface samples".into()));
        }
        let up = up
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Argument("align: zero up vector".into()))?;
        let mut prepared = Vec::new();
        for v in views {
            let (w, h) = (v.camera.width as usize, v.camera.height as usize);
            if v.target.dims() != (w, h) || v.ignore.as_ref().is_some_and(|m| m.dims() != (w, h)) {
                return Err(Error::Argument(format!(
                    "align: view {} has images of the wrong size",
                    v.camera.frame_index
                )));
            }
            let Some(rect) = Mask::threshold(&v.target, 0.0).bounding_rect() else {
                continue;
            };
            let rect = rect.expanded(cfg.roi_margin, w, h);
            let mut target = Vec::with_capacity(rect.area());
            let mut weight = Vec::with_capacity(rect.area());
            for r in rect.row0..rect.row1 {
                for c in rect.col0..rect.col1 {
                    target.push(*v.target.get(r, c));
                    weight.push(if v.ignore.as_ref().is_some_and(|m| *m.get(r, c)) { 0.0 } else { 1.0 });
                }
            }
            prepared.push(PreparedView {
                camera: v.camera.clone(),
                rect,
                target,
                weight,
            });
        }
        let mut problem = Self {
            splats: crate::render::splats(asset),
            surface,
            views: prepared,
            sdf: MeshSdf::new(background),
            support: None,
            up,
            cfg: cfg.clone(),
            // the tail beyond 1e-7 transmittance moves the loss by far less
            // than a finite-difference step does
            render: RenderOptions {
                min_transmittance: 1e-7,
                // object-sized crops: small tiles keep per-pixel lists short
                tile_size: 4,
                ..RenderOptions::smooth()
            },
        };
        problem.support = problem.find_support(background, init)?;
        Ok(problem)
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn support(&self) -> Option<&Plane> {
        self.support.as_ref()
    }

    pub fn config(&self) -> &AlignConfig {
        &self.cfg
    }

    fn find_support(&self, background: &[&CollisionMesh], init: &PlacementPose) -> Result<Option<Plane>> {
        let placed = init.transform_points(&self.surface)?;
        let heights = self.lowest(&placed);
        let low = heights.iter().sum::<f64>() / heights.len() as f64;
        let cos_tol = self.cfg.support_tolerance_deg.to_radians().cos();
        let size = init.scale;
        let mut best: Option<Plane> = None;
        for mesh in background {
            for (plane, _) in &mesh.planes {
                let n = plane.normal.dot(&self.up);
                if n.abs() < cos_tol {
                    continue;
                }
                let p = if n < 0.0 { plane.flipped() } else { *plane };
                // height of the plane along up at the object's footprint
                let h = p.offset / p.normal.dot(&self.up);
                if h > low + 0.1 * size {
                    continue;
                }
                if best.map_or(true, |b: Plane| h > b.offset / b.normal.dot(&self.up)) {
                    best = Some(p);
                }
            }
        }
        Ok(best)
    }

    /// Heights along up of the lowest `contact_percentile` share of points.
    fn lowest(&self, placed: &[Vector3<f64>]) -> Vec<f64> {
        let mut h: Vec<f64> = placed.iter().map(|p| p.dot(&self.up)).collect();
        let k = ((self.cfg.contact_percentile * h.len() as f64).ceil() as usize).clamp(1, h.len());
        h.select_nth_unstable_by(k - 1, f64::total_cmp);
        h.truncate(k);
        h
    }

    /// Coverage of the placed asset as the mask term sees it.
    pub fn render_silhouette(&self, pose: &PlacementPose, camera: &CameraFrame) -> Result<ScalarImage> {
        let r = pose.rotation()?;
        let t = pose.t();
        let placed: Vec<Splat> = self.splats.iter().map(|s| s.transformed(&r, &t, pose.scale)).collect();
        Ok(crate::render::render_silhouette_splats(&placed, camera, &self.render))
    }

    pub fn silhouette_loss(&self, rotation: &Matrix3<f64>, pose: &PlacementPose) -> f64 {
        if self.views.is_empty() {
            return 0.0;
        }
        let t = pose.t();
        let placed: Vec<Splat> = self.splats.iter().map(|s| s.transformed(rotation, &t, pose.scale)).collect();
        let per_view: Vec<f64> = self
            .views
            .iter()
            .map(|v| {
                let rast = Rasterizer::new(&placed, &v.camera, &self.render);
                let p = rast.weighted_sum_region(None, v.rect);
                // fuzzy Jaccard: reduces to the usual IoU for binary targets
                let (mut inter, mut union) = (0.0, 0.0);
                for ((&a, &b), &w) in p.iter().zip(&v.target).zip(&v.weight) {
                    inter += w * a.min(b);
                    union += w * a.max(b);
                }
                if union > 0.0 {
                    1.0 - inter / union
                } else {
                    0.0
                }
            })
            .collect();
        per_view.iter().sum::<f64>() / per_view.len() as f64
    }

    pub fn loss(&self, pose: &PlacementPose) -> Result<LossComponents> {
        pose.validate()?;
        let r = pose.rotation()?;
        let mask = self.silhouette_loss(&r, pose);
        let placed: Vec<Vector3<f64>> = self.surface.iter().map(|p| pose.apply(&r, p)).collect();
        let (contact, skipped) = match &self.support {
            Some(plane) => {
                let mut d: Vec<f64> = placed.iter().map(|p| plane.signed_distance(p)).collect();
                let k = ((self.cfg.contact_percentile * d.len() as f64).ceil() as usize).clamp(1, d.len());
                d.select_nth_unstable_by(k - 1, f64::total_cmp);
                (d[..k].iter().map(|v| v * v).sum::<f64>() / k as f64, false)
            }
            None => (0.0, true),
        };
        let penetration = if self.sdf.is_empty() {
            0.0
        } else {
            placed
                .par_iter()
                .map(|p| {
                    let d = self.sdf.signed_distance(p);
                    if d < 0.0 {
                        d * d
                    } else {
                        0.0
                    }
                })
                .collect::<Vec<_>>()
                .iter()
                .sum::<f64>()
                / placed.len() as f64
        };
        Ok(LossComponents {
            mask,
            contact,
            penetration,
            total: mask + self.cfg.contact_weight * contact + self.cfg.penetration_weight * penetration,
            contact_skipped: skipped,
        })
    }

    /// Smallest signed distance over the placed surface samples.
    pub fn min_clearance(&self, pose: &PlacementPose) -> Result<f64> {
        let r = pose.rotation()?;
        Ok(self
            .surface
            .iter()
            .map(|p| self.sdf.signed_distance(&pose.apply(&r, p)))
            .fold(f64::INFINITY, f64::min))
    }
}

/// Parameters scaled so that a unit change moves the object by about its
/// own size: translation and scale are divided by the reference scale.
#[derive(Clone, Copy, Debug)]
struct Params {
    reference: f64,
}

impl Params {
    fn encode(&self, p: &PlacementPose) -> [f64; 10] {
        let mut x = [0.0; 10];
        for i in 0..3 {
            x[i] = p.translation[i] / self.reference;
        }
        x[3..9].copy_from_slice(&p.r6);
        x[9] = p.scale / self.reference;
        x
    }

    fn decode(&self, x: &[f64; 10]) -> PlacementPose {
        let mut r6 = [0.0; 6];
        r6.copy_from_slice(&x[3..9]);
        PlacementPose {
            translation: [x[0] * self.reference, x[1] * self.reference, x[2] * self.reference],
            r6,
            scale: x[9] * self.reference,
        }
    }
}

/// Central-difference gradient of the total loss in normalised parameters.
pub fn loss_gradient(problem: &AlignProblem, pose: &PlacementPose, step: f64, reference: f64) -> Result<[f64; 10]> {
    let params = Params { reference };
    let x = params.encode(pose);
    let evals = (0..20)
        .into_par_iter()
        .map(|k| {
            let mut y = x;
            y[k / 2] += if k % 2 == 0 { step } else { -step };
            problem.loss(&params.decode(&y)).map(|c| c.total)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut g = [0.0; 10];
    for i in 0..10 {
        g[i] = (evals[2 * i] - evals[2 * i + 1]) / (2.0 * step);
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub pose: PlacementPose,
    pub initial: LossComponents,
    pub final_loss: LossComponents,
    /// Total loss after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// The scale hit one of its bounds at least once.
    pub scale_clamped: bool,
    /// Distance the settle step moved the object along up.
    pub settle_lift: f64,
}

fn dot(a: &[f64; 10], b: &[f64; 10]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient descent on the placement loss with Barzilai–Borwein steps and
/// Armijo backtracking. Every accepted step decreases the loss.
pub fn refine_pose(init: &PlacementPose, problem: &AlignProblem) -> Result<RefineReport> {
    let cfg = problem.config();
    let init = init.orthonormalized()?;
    let reference = init.scale;
    let params = Params { reference };
    let (s_lo, s_hi) = (cfg.scale_bounds[0] * init.scale, cfg.scale_bounds[1] * init.scale);
    let mut scale_clamped = false;

    let mut pose = init;
    let mut current = problem.loss(&pose)?;
    let initial = current;
    let mut history = vec![current.total];
    let mut g = loss_gradient(problem, &pose, cfg.fd_step, reference)?;
    let mut prev: Option<([f64; 10], [f64; 10])> = None;
    let mut alpha_prev = {
        let gn = dot(&g, &g).sqrt();
        if gn > 0.0 {
            cfg.initial_step / gn
        } else {
            0.0
        }
    };
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        let gn2 = dot(&g, &g);
        if !(gn2 > 0.0) {
            break;
        }
        let x = params.encode(&pose);
        let mut alpha = match prev {
            Some((xp, gp)) => {
                let s: [f64; 10] = std::array::from_fn(|i| x[i] - xp[i]);
                let y: [f64; 10] = std::array::from_fn(|i| g[i] - gp[i]);
                let sy = dot(&s, &y);
                if sy > 0.0 {
                    dot(&s, &s) / sy
                } else {
                    alpha_prev
                }
            }
            None => alpha_prev,
        };
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let mut y: [f64; 10] = std::array::from_fn(|i| x[i] - alpha * g[i]);
            let mut clamped = false;
            let s = y[9] * reference;
            if s < s_lo || s > s_hi {
                y[9] = s.clamp(s_lo, s_hi) / reference;
                clamped = true;
            }
            let Ok(candidate) = params.decode(&y).orthonormalized() else {
                alpha *= 0.5;
                continue;
            };
            let c = problem.loss(&candidate)?;
            // sufficient decrease along the (possibly clamped) step
            let moved: f64 = (0..10).map(|i| (x[i] - params.encode(&candidate)[i]) * g[i]).sum::<f64>();
            if c.total <= current.total - cfg.armijo * moved.max(0.0) && c.total < current.total {
                accepted = Some((candidate, c, clamped));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, c, clamped)) = accepted else {
            break;
        };
        iterations += 1;
        scale_clamped |= clamped;
        alpha_prev = alpha;
        let improvement = (current.total - c.total) / current.total.abs().max(1e-300);
        prev = Some((x, g));
        pose = next;
        current = c;
        history.push(current.total);
        if improvement < cfg.min_relative_improvement {
            break;
        }
        g = loss_gradient(problem, &pose, cfg.fd_step, reference)?;
    }

    let mut settle_lift = 0.0;
    if cfg.settle && !problem.sdf.is_empty() {
        let clearance = problem.min_clearance(&pose)?;
        if clearance < 0.0 {
            // the SDF of a horizontal support changes one-for-one with height
            let mut lift = -clearance;
            for _ in 0..8 {
                let t = pose.t() + problem.up * lift;
                let moved = PlacementPose {
                    translation: t.into(),
                    ..pose
                };
                let c = problem.min_clearance(&moved)?;
                if c >= 0.0 {
                    pose = moved;
                    settle_lift = lift;
                    break;
                }
                lift += -c + 1e-12;
            }
            current = problem.loss(&pose)?;
        }
    }

    Ok(RefineReport {
        pose,
        initial,
        final_loss: current,
        history,
        iterations,
        scale_clamped,
        settle_lift,
    })
}

/// Render the asset at each candidate pose in the reference view and keep
/// the candidate whose appearance embeds closest to the observed object.
/// Ties go to the lower ICP residual, then to the earlier candidate.
pub fn select_pose(
    candidates: &[IcpCandidate],
    asset: &GaussianScene,
    camera: &CameraFrame,
    reference_rgb: &RgbImage,
    reference_mask: &Mask,
    embedder: &dyn Embedder,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::Argument("select_pose: no candidates".into()));
    }
    if candidates.len() == 1 {
        return Ok((0, vec![1.0]));
    }
    let rect = reference_mask
        .bounding_rect()
        .ok_or_else(|| Error::Argument("select_pose: empty reference mask".into()))?;
    let crop = |img: &RgbImage, keep: Option<&Mask>| -> Result<RgbImage> {
        let mut data = Vec::with_capacity(rect.area());
        for r in rect.row0..rect.row1 {
            for c in rect.col0..rect.col1 {
                let inside = keep.map_or(true, |m| *m.get(r, c));
                data.push(if inside { *img.get(r, c) } else { [0.0; 3] });
            }
        }
        RgbImage::from_vec(rect.cols(), rect.rows(), data)
    };
    let reference = embedder.embed(&crop(reference_rgb, Some(reference_mask))?)?;
    let base = crate::render::splats(asset);
    let opts = RenderOptions::default();
    let mut sims = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let r = cand.pose.rotation()?;
        let t = cand.pose.t();
        let placed: Vec<Splat> = base.iter().map(|s| s.transformed(&r, &t, cand.pose.scale)).collect();
        let frame = render_splats(&placed, camera, &opts);
        let emb = embedder.embed(&crop(&frame.color, None)?)?;
        sims.push(cosine_similarity(&reference, &emb));
    }
    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (sims[i], sims[best]);
        if a > b || (a == b && candidates[i].residual < candidates[best].residual) {
            best = i;
        }
    }
    Ok((best, sims))
}
