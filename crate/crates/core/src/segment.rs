//! Lifting multi-view object masks onto per-Gaussian membership.
//!
//! For object m and score vector s, the rendered soft mask of a ray is
//! `M̂(r) = Σ_i w_i(r) s_i` with the compositing weights held fixed. The loss
//! `Σ_t Σ_r [-M M̂ + λ (1 - M) M̂]` is linear in s, so its gradient is
//! independent of s: `∂L/∂s_i = Σ_r w_i(r) (-M(r) + λ (1 - M(r)))`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_mask_png, save_mask_png, Mask};
use crate::render::{splats, Rasterizer, RenderOptions, WeightMap};
use crate::scene::{GaussianScene, Label, Trajectory};

/// Binary masks of one object, keyed by frame index.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    pub object_id: Label,
    masks: BTreeMap<u32, Mask>,
}

impl MaskStack {
    pub fn new(object_id: Label, masks: BTreeMap<u32, Mask>) -> Result<Self> {
        let mut dims = None;
        for (f, m) in &masks {
            match dims {
                None => dims = Some(m.dims()),
                Some(d) if d != m.dims() => {
                    return Err(Error::Argument(format!(
                        "object {object_id}: frame {f} mask is {}x{}, expected {}x{}",
                        m.width(),
                        m.height(),
                        d.0,
                        d.1
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { object_id, masks })
    }

    pub fn get(&self, frame: u32) -> Option<&Mask> {
        self.masks.get(&frame)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &Mask)> {
        self.masks.iter().map(|(&f, m)| (f, m))
    }

    pub fn frames(&self) -> impl Iterator<Item = u32> + '_ {
        self.masks.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Frames in which the object is visible, i.e. whose mask is nonempty.
    pub fn view_set(&self) -> Vec<u32> {
        self.masks.iter().filter(|(_, m)| m.any()).map(|(&f, _)| f).collect()
    }

    pub fn total_area(&self) -> usize {
        self.masks.values().map(Mask::count).sum()
    }

    /// Check every mask against the camera of its frame.
    pub fn validate(&self, trajectory: &Trajectory) -> Result<()> {
        for (&f, m) in &self.masks {
            let cam = trajectory.get(f).ok_or_else(|| {
                Error::Data(format!("object {}: mask for unknown frame {f}", self.object_id))
            })?;
            if m.dims() != (cam.width as usize, cam.height as usize) {
                return Err(Error::Data(format!(
                    "object {}: frame {f} mask is {}x{} but the camera is {}x{}",
                    self.object_id,
                    m.width(),
                    m.height(),
                    cam.width,
                    cam.height
                )));
            }
        }
        Ok(())
    }

    /// Mean IoU over frames where either stack has a nonempty mask.
    pub fn mean_iou(&self, other: &MaskStack) -> f64 {
        let mut frames: Vec<u32> = self.frames().chain(other.frames()).collect();
        frames.sort_unstable();
        frames.dedup();
        let mut sum = 0.0;
        let mut n = 0usize;
        for f in frames {
            let (a, b) = (self.get(f), other.get(f));
            let nonempty = a.is_some_and(Mask::any) || b.is_some_and(Mask::any);
            if !nonempty {
                continue;
            }
            sum += match (a, b) {
                (Some(a), Some(b)) => a.iou(b),
                _ => 0.0,
            };
            n += 1;
        }
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }

    pub fn object_dir(root: &Path, object_id: Label) -> PathBuf {
        root.join(format!("obj_{object_id:03}"))
    }

    /// Write `obj_{m:03}/frame_{t:05}.png` under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = Self::object_dir(root, self.object_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (&f, m) in &self.masks {
            save_mask_png(m, &dir.join(format!("frame_{f:05}.png")))?;
        }
        Ok(())
    }

    pub fn load(root: &Path, object_id: Label) -> Result<Self> {
        let dir = Self::object_dir(root, object_id);
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut masks = BTreeMap::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(frame) = name
                .strip_prefix("frame_")
                .and_then(|n| n.strip_suffix(".png"))
                .and_then(|n| n.parse::<u32>().ok())
            else {
                continue;
            };
            masks.insert(frame, load_mask_png(&path)?);
        }
        Self::new(object_id, masks)
    }
}

/// Per-primitive membership scores for one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentField {
    pub object_id: Label,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Weight of the background-suppression term.
    pub lambda: f64,
    /// Binarisation threshold; a primitive belongs to the object iff s > tau.
    pub tau: f64,
    /// Step in units of a primitive's normalised gradient.
    pub step_size: f64,
    pub max_iters: usize,
    /// Rays sampled per view and iteration; 0 uses every pixel.
    pub ray_samples: usize,
    pub init_score: f64,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 0.5,
            step_size: 0.1,
            max_iters: 500,
            ray_samples: 4096,
            init_score: 0.5,
            seed: 0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("segmentation lambda must be >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config("segmentation tau must lie in (0, 1)".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("segmentation step size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.init_score) {
            return Err(Error::Config("initial score must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Compositing weights of every pixel of every frame, for a fixed scene.
pub struct WeightCache {
    primitive_count: usize,
    views: BTreeMap<u32, WeightMap>,
}

impl WeightCache {
    pub fn build(scene: &GaussianScene, trajectory: &Trajectory, opts: &RenderOptions) -> Self {
        let s = splats(scene);
        let views = trajectory
            .frames()
            .iter()
            .map(|cam| (cam.frame_index, Rasterizer::new(&s, cam, opts).weight_map()))
            .collect();
        Self {
            primitive_count: scene.len(),
            views,
        }
    }

    pub fn from_maps(primitive_count: usize, views: BTreeMap<u32, WeightMap>) -> Self {
        Self { primitive_count, views }
    }

    pub fn primitive_count(&self) -> usize {
        self.primitive_count
    }

    pub fn view(&self, frame: u32) -> Option<&WeightMap> {
        self.views.get(&frame)
    }

    /// Cached views that also have a nonempty mask.
    fn active_views<'a>(&'a self, masks: &'a MaskStack) -> Result<Vec<(&'a WeightMap, &'a Mask)>> {
        let mut out = Vec::new();
        for f in masks.view_set() {
            let wm = self.views.get(&f).ok_or_else(|| {
                Error::Argument(format!("no cached weights for frame {f}"))
            })?;
            let m = masks.get(f).expect("frame from view set");
            if m.dims() != (wm.width, wm.height) {
                return Err(Error::Argument(format!(
                    "frame {f}: mask is {}x{} but the view is {}x{}",
                    m.width(),
                    m.height(),
                    wm.width,
                    wm.height
                )));
            }
            out.push((wm, m));
        }
        if out.is_empty() {
            return Err(Error::Argument(format!("object {}: empty view set", masks.object_id)));
        }
        Ok(out)
    }

    fn check_scores(&self, field: &AssignmentField) -> Result<()> {
        if field.scores.len() != self.primitive_count {
            return Err(Error::Argument(format!(
                "{} scores for {} primitives",
                field.scores.len(),
                self.primitive_count
            )));
        }
        Ok(())
    }
}

#[inline]
fn ray_coefficient(inside: bool, lambda: f64) -> f64 {
    if inside {
        -1.0
    } else {
        lambda
    }
}

/// Loss over every ray of every view in the object's view set.
pub fn seg_loss(
    cache: &WeightCache,
    field: &AssignmentField,
    masks: &MaskStack,
    cfg: &SegmentationConfig,
) -> Result<f64> {
    cache.check_scores(field)?;
    let views = cache.active_views(masks)?;
    let mut total = 0.0;
    for (wm, m) in views {
        for p in 0..wm.pixel_count() {
            let (idx, wts) = wm.pixel(p);
            let soft: f64 = idx.iter().zip(wts).map(|(&i, &w)| w * field.scores[i as usize]).sum();
            total += ray_coefficient(m.data()[p], cfg.lambda) * soft;
        }
    }
    Ok(total)
}

/// Exact gradient of [`seg_loss`]; it does not depend on the scores.
pub fn seg_gradient(cache: &WeightCache, masks: &MaskStack, cfg: &SegmentationConfig) -> Result<Vec<f64>> {
    let views = cache.active_views(masks)?;
    let mut g = vec![0.0; cache.primitive_count];
    for (wm, m) in views {
        accumulate(&mut g, wm, m, cfg.lambda, 0..wm.pixel_count(), 1.0);
    }
    Ok(g)
}

fn accumulate(
    g: &mut [f64],
    wm: &WeightMap,
    m: &Mask,
    lambda: f64,
    pixels: impl Iterator<Item = usize>,
    scale: f64,
) {
    for p in pixels {
        let c = scale * ray_coefficient(m.data()[p], lambda);
        let (idx, wts) = wm.pixel(p);
        for (&i, &w) in idx.iter().zip(wts) {
            g[i as usize] += w * c;
        }
    }
}

/// Projected, diagonally preconditioned descent on the scores with weights
/// held fixed. Each primitive's step is normalised by its total compositing
/// weight over the view set, so every visible primitive moves at the same
/// rate regardless of its screen footprint. Rays are subsampled per view and
/// iteration.
pub fn optimize_assignment(
    cache: &WeightCache,
    masks: &MaskStack,
    cfg: &SegmentationConfig,
) -> Result<AssignmentField> {
    cfg.validate()?;
    if masks.view_set().is_empty() {
        return Err(Error::EmptyAssignment(format!(
            "object {} has no nonempty mask in any frame",
            masks.object_id
        )));
    }
    let views = cache.active_views(masks)?;
    let n = cache.primitive_count;

    let mut visibility = vec![0.0; n];
    for (wm, _) in &views {
        for p in 0..wm.pixel_count() {
            let (idx, wts) = wm.pixel(p);
            for (&i, &w) in idx.iter().zip(wts) {
                visibility[i as usize] += w;
            }
        }
    }

    let mut scores = vec![cfg.init_score; n];
    let full = |wm: &WeightMap| cfg.ray_samples == 0 || cfg.ray_samples >= wm.pixel_count();
    let exact = if views.iter().all(|(wm, _)| full(wm)) {
        Some(seg_gradient(cache, masks, cfg)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (masks.object_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));

    for _ in 0..cfg.max_iters {
        let grad = match &exact {
            Some(g) => g.clone(),
            None => {
                // draw the samples sequentially so the stream is reproducible
                let samples: Vec<Vec<usize>> = views
                    .iter()
                    .map(|(wm, _)| {
                        if full(wm) {
                            (0..wm.pixel_count()).collect()
                        } else {
                            (0..cfg.ray_samples).map(|_| rng.gen_range(0..wm.pixel_count())).collect()
                        }
                    })
                    .collect();
                let partial: Vec<Vec<f64>> = views
                    .par_iter()
                    .zip(samples.par_iter())
                    .map(|((wm, m), pix)| {
                        let mut g = vec![0.0; n];
                        let scale = wm.pixel_count() as f64 / pix.len() as f64;
                        accumulate(&mut g, wm, m, cfg.lambda, pix.iter().copied(), scale);
                        g
                    })
                    .collect();
                let mut g = vec![0.0; n];
                for pg in partial {
                    for (a, b) in g.iter_mut().zip(pg) {
                        *a += b;
                    }
                }
                g
            }
        };
        let mut moved = false;
        for i in 0..n {
            if visibility[i] <= 0.0 || grad[i] == 0.0 {
                continue;
            }
            let next = (scores[i] - cfg.step_size * grad[i] / visibility[i]).clamp(0.0, 1.0);
            moved |= next != scores[i];
            scores[i] = next;
        }
        if !moved && exact.is_some() {
            break;
        }
    }
    Ok(AssignmentField {
        object_id: masks.object_id,
        scores,
    })
}

/// `z_i = 1` iff `s_i > tau`.
pub fn binarize(field: &AssignmentField, tau: f64) -> Vec<bool> {
    field.scores.iter().map(|&s| s > tau).collect()
}

/// Label each primitive with the object whose super-threshold score is
/// highest (ties go to the smaller id); everything else becomes background.
pub fn assign_objects(
    scene: &GaussianScene,
    fields: &[AssignmentField],
    cfg: &SegmentationConfig,
) -> Result<GaussianScene> {
    let mut ids: Vec<Label> = fields.iter().map(|f| f.object_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Argument("assignment fields share an object id".into()));
    }
    if ids.first() == Some(&0) {
        return Err(Error::Argument("object id 0 is reserved for the background".into()));
    }
    for f in fields {
        if f.scores.len() != scene.len() {
            return Err(Error::Argument(format!(
                "object {}: {} scores for {} primitives",
                f.object_id,
                f.scores.len(),
                scene.len()
            )));
        }
    }
    let labels = (0..scene.len())
        .map(|i| {
            let mut best: Option<(f64, Label)> = None;
            for f in fields {
                let s = f.scores[i];
                if s <= cfg.tau {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, bid)) => s > bs || (s == bs && f.object_id < bid),
                };
                if better {
                    best = Some((s, f.object_id));
                }
            }
            best.map_or(0, |(_, id)| id)
        })
        .collect();
    let mut out = scene.clone();
    out.set_labels(labels)?;
    Ok(out)
}

/// IoU of two primitive sets given as membership flags.
pub fn set_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::WeightRecord;
    use proptest::prelude::*;

    fn one_ray(weight: f64, inside: bool) -> (WeightCache, MaskStack) {
        let rec = WeightRecord {
            pixel: (0, 0),
            entries: vec![(0, weight)],
        };
        let wm = WeightMap::from_records(1, 1, &[rec]).unwrap();
        let cache = WeightCache::from_maps(1, BTreeMap::from([(0, wm)]));
        let masks = BTreeMap::from([(0, Mask::filled(1, 1, inside))]);
        (cache, MaskStack::new(1, masks).unwrap())
    }

    #[test]
    fn single_ray_losses() {
        let cfg = SegmentationConfig::default();
        let field = AssignmentField {
            object_id: 1,
            scores: vec![0.8],
        };
        let (cache, masks) = one_ray(1.0, true);
        assert!((seg_loss(&cache, &field, &masks, &cfg).unwrap() + 0.8).abs() < 1e-15);
        // M = 0 on the ray; a second pixel keeps the frame in the view set
        let rec = WeightRecord {
            pixel: (0, 0),
            entries: vec![(0, 1.0)],
        };
        let wm = WeightMap::from_records(2, 1, &[rec]).unwrap();
        let cache = WeightCache::from_maps(1, BTreeMap::from([(0, wm)]));
        let mut m = Mask::filled(2, 1, false);
        m.set(0, 1, true);
        let masks = MaskStack::new(1, BTreeMap::from([(0, m)])).unwrap();
        assert!((seg_loss(&cache, &field, &masks, &cfg).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_view_set_is_rejected() {
        let (cache, _) = one_ray(1.0, true);
        let masks = MaskStack::new(1, BTreeMap::from([(0, Mask::filled(1, 1, false))])).unwrap();
        let field = AssignmentField {
            object_id: 1,
            scores: vec![0.5],
        };
        let cfg = SegmentationConfig::default();
        assert!(matches!(seg_loss(&cache, &field, &masks, &cfg), Err(Error::Argument(_))));
        assert!(matches!(
            optimize_assignment(&cache, &masks, &cfg),
            Err(Error::EmptyAssignment(_))
        ));
    }

    #[test]
    fn covered_primitive_goes_to_one_uncovered_to_zero() {
        let (cache, masks) = one_ray(0.9, true);
        let f = optimize_assignment(&cache, &masks, &SegmentationConfig::default()).unwrap();
        assert_eq!(f.scores, vec![1.0]);

        let recs = [
            WeightRecord {
                pixel: (0, 0),
                entries: vec![(0, 0.9)],
            },
            WeightRecord {
                pixel: (0, 1),
                entries: vec![(1, 0.9)],
            },
        ];
        let wm = WeightMap::from_records(2, 1, &recs).unwrap();
        let cache = WeightCache::from_maps(2, BTreeMap::from([(0, wm)]));
        let mut m = Mask::filled(2, 1, false);
        m.set(0, 1, true);
        let masks = MaskStack::new(1, BTreeMap::from([(0, m)])).unwrap();
        let f = optimize_assignment(&cache, &masks, &SegmentationConfig::default()).unwrap();
        assert_eq!(f.scores, vec![0.0, 1.0]);
    }

    #[test]
    fn binarize_is_strict() {
        let f = AssignmentField {
            object_id: 1,
            scores: vec![0.5, 1.0, 0.0, 0.500001],
        };
        assert_eq!(binarize(&f, 0.5), vec![false, true, false, true]);
    }

    #[test]
    fn argmax_assignment() {
        let scene = GaussianScene::new(vec![
            crate::scene::GaussianPrimitive::isotropic(nalgebra::Vector3::zeros(), 0.1, 0.5, [0.5; 3]);
            2
        ]);
        let cfg = SegmentationConfig::default();
        let a = AssignmentField {
            object_id: 1,
            scores: vec![0.9, 0.2],
        };
        let b = AssignmentField {
            object_id: 2,
            scores: vec![0.6, 0.4],
        };
        let out = assign_objects(&scene, &[a.clone(), b], &cfg).unwrap();
        assert_eq!(out.labels(), &[1, 0]);
        assert!(assign_objects(&scene, &[a.clone(), a], &cfg).is_err());
    }

    #[test]
    fn mask_stack_round_trip_and_iou() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask::filled(4, 3, false);
        m.set(1, 2, true);
        let stack = MaskStack::new(7, BTreeMap::from([(0, m.clone()), (12, Mask::filled(4, 3, false))])).unwrap();
        stack.save(dir.path()).unwrap();
        assert!(dir.path().join("obj_007/frame_00012.png").exists());
        let back = MaskStack::load(dir.path(), 7).unwrap();
        assert_eq!(back, stack);
        assert_eq!(back.view_set(), vec![0]);
        assert_eq!(stack.mean_iou(&back), 1.0);
        let other = MaskStack::new(8, BTreeMap::from([(0, Mask::filled(4, 3, false))])).unwrap();
        assert_eq!(stack.mean_iou(&other), 0.0);
        assert!(MaskStack::new(1, BTreeMap::from([(0, m), (1, Mask::filled(2, 2, false))])).is_err());
    }

    proptest! {
        #[test]
        fn binarize_is_idempotent(scores in prop::collection::vec(0.0f64..=1.0, 1..64), tau in 0.01f64..0.99) {
            let f = AssignmentField { object_id: 1, scores };
            let z = binarize(&f, tau);
            let again = AssignmentField {
                object_id: 1,
                scores: z.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            };
            prop_assert_eq!(binarize(&again, tau), z);
        }
    }
}
