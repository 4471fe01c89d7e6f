//! Hole masks, inpainting and background re-initialisation after object removal.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{bounded_map, DepthEstimator, Inpainter};
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage, ScalarImage};
use crate::render::{render_silhouette, splats, RenderOptions, Rasterizer};
use crate::scene::{GaussianPrimitive, GaussianScene, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreConfig {
    /// Growth of the fused object silhouettes, in pixels.
    pub dilation_radius: usize,
    /// Every k-th frame becomes a keyframe for 3D lifting.
    pub keyframe_spacing: usize,
    /// Colour refinement sweeps over the keyframes.
    pub refine_iters: usize,
    /// Opacity of re-initialised Gaussians.
    pub opacity: f64,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self {
            dilation_radius: 3,
            keyframe_spacing: 10,
            refine_iters: 20,
            opacity: 0.95,
        }
    }
}

impl RestoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keyframe_spacing == 0 {
            return Err(Error::Config("keyframe_spacing must be at least 1".into()));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::Config("re-initialisation opacity must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-frame union of everything that is removed, grown to cover splat tails.
#[derive(Clone, Debug, PartialEq)]
pub struct CompleteMaskSet {
    pub masks: BTreeMap<u32, Mask>,
    pub dilation_radius: usize,
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    pub frames: BTreeMap<u32, RgbImage>,
    pub keyframes: Vec<u32>,
    pub keyframe_depths: BTreeMap<u32, ScalarImage>,
}

/// Render the labelled (non-background) Gaussians on their own in every
/// view, threshold at 0.5 and dilate.
pub fn fuse_masks(
    scene: &GaussianScene,
    cams: &Trajectory,
    radius: usize,
    opts: &RenderOptions,
) -> Result<CompleteMaskSet> {
    let members: Vec<usize> = (0..scene.len()).filter(|&i| scene.labels()[i] != 0).collect();
    if members.is_empty() {
        return Err(Error::Argument("no labelled objects to remove".into()));
    }
    let objects = scene.subset(&members);
    let masks = cams
        .frames()
        .iter()
        .map(|cam| {
            let sil = render_silhouette(&objects, cam, opts);
            (cam.frame_index, Mask::threshold(&sil, 0.5).dilate(radius))
        })
        .collect();
    Ok(CompleteMaskSet {
        masks,
        dilation_radius: radius,
    })
}

/// Every `spacing`-th frame in index order.
pub fn select_keyframes(frames: &[u32], spacing: usize) -> Vec<u32> {
    let mut sorted = frames.to_vec();
    sorted.sort_unstable();
    sorted.into_iter().step_by(spacing.max(1)).collect()
}

/// Inpaint every frame with a nonempty hole and estimate keyframe depths.
/// Pixels outside the hole are copied from the input whatever the backend
/// returns.
pub fn inpaint_background(
    frames: &BTreeMap<u32, RgbImage>,
    masks: &CompleteMaskSet,
    inpainter: &dyn Inpainter,
    depth: &dyn DepthEstimator,
    keyframe_spacing: usize,
    max_in_flight: usize,
) -> Result<InpaintResult> {
    let keys: Vec<u32> = frames.keys().copied().collect();
    let filled = bounded_map(&keys, max_in_flight, |&f| {
        let rgb = &frames[&f];
        let Some(mask) = masks.masks.get(&f).filter(|m| m.any()) else {
            return Ok(rgb.clone());
        };
        if mask.dims() != rgb.dims() {
            return Err(Error::Argument(format!("frame {f}: mask and image sizes differ")));
        }
        let out = inpainter.inpaint(f, rgb, mask).map_err(|e| with_frame(e, f))?;
        if out.dims() != rgb.dims() {
            return Err(Error::Protocol {
                message: format!("frame {f}: inpainted image has the wrong size"),
                raw: String::new(),
            });
        }
        let mut merged = rgb.clone();
        for (p, m) in mask.data().iter().enumerate() {
            if *m {
                merged.data_mut()[p] = out.data()[p];
            }
        }
        Ok(merged)
    })?;
    let frames_out: BTreeMap<u32, RgbImage> = keys.iter().copied().zip(filled).collect();
    let keyframes = select_keyframes(&keys, keyframe_spacing);
    let depths = bounded_map(&keyframes, max_in_flight, |&k| {
        depth.depth(k, &frames_out[&k]).map_err(|e| with_frame(e, k))
    })?;
    Ok(InpaintResult {
        frames: frames_out,
        keyframe_depths: keyframes.iter().copied().zip(depths).collect(),
        keyframes,
    })
}

fn with_frame(e: Error, frame: u32) -> Error {
    match e {
        Error::Transport {
            message,
            frame: None,
            retryable,
        } => Error::Transport {
            message,
            frame: Some(frame),
            retryable,
        },
        other => other,
    }
}

/// Lift hole pixels of every keyframe to new Gaussians and fit their
/// colours to the inpainted keyframes.
///
/// Each masked pixel with a valid depth becomes an isotropic Gaussian at the
/// unprojected point, sized to cover about one pixel and coloured by the
/// inpainted pixel. Positions and opacities stay fixed, so the colour fit is
/// linear; it runs a Jacobi-preconditioned descent on the squared error of
/// the keyframe pixels the new Gaussians touch.
pub fn reinit_gaussians(
    inpaint: &InpaintResult,
    masks: &CompleteMaskSet,
    cams: &Trajectory,
    background: &GaussianScene,
    cfg: &RestoreConfig,
    opts: &RenderOptions,
) -> Result<GaussianScene> {
    cfg.validate()?;
    let mut out = background.clone();
    let base = background.len();
    let mut any_masked = false;
    for &k in &inpaint.keyframes {
        let Some(mask) = masks.masks.get(&k) else { continue };
        if !mask.any() {
            continue;
        }
        any_masked = true;
        let cam = cams
            .get(k)
            .ok_or_else(|| Error::Data(format!("keyframe {k} has no camera")))?;
        let depth = inpaint
            .keyframe_depths
            .get(&k)
            .ok_or_else(|| Error::Data(format!("keyframe {k} has no depth")))?;
        let rgb = inpaint
            .frames
            .get(&k)
            .ok_or_else(|| Error::Data(format!("keyframe {k} has no inpainted frame")))?;
        if depth.dims() != mask.dims() || rgb.dims() != mask.dims() {
            return Err(Error::Data(format!("keyframe {k}: depth, frame and mask sizes differ")));
        }
        let (w, h) = mask.dims();
        for row in 0..h {
            for col in 0..w {
                if !*mask.get(row, col) {
                    continue;
                }
                let d = *depth.get(row, col);
                if !(d.is_finite() && d > opts.near && d < opts.far) {
                    continue;
                }
                let p = cam.unproject(row, col, d);
                out.push(
                    GaussianPrimitive::isotropic(p, d / cam.fx, cfg.opacity, *rgb.get(row, col)),
                    0,
                );
            }
        }
    }
    if !any_masked {
        return Ok(out);
    }
    if out.len() == base {
        return Err(Error::Data("no masked keyframe pixel has a valid depth".into()));
    }
    refine_colors(&mut out, base, inpaint, masks, cams, cfg, opts)?;
    Ok(out)
}

fn refine_colors(
    scene: &mut GaussianScene,
    first_new: usize,
    inpaint: &InpaintResult,
    masks: &CompleteMaskSet,
    cams: &Trajectory,
    cfg: &RestoreConfig,
    opts: &RenderOptions,
) -> Result<()> {
    let n = scene.len();
    let sp = splats(scene);
    // weights are fixed: collect each keyframe's hole pixels once
    let mut records = Vec::new();
    for &k in &inpaint.keyframes {
        let Some(mask) = masks.masks.get(&k).filter(|m| m.any()) else { continue };
        let cam = cams.get(k).expect("checked by caller");
        let rast = Rasterizer::new(&sp, cam, opts);
        let (w, h) = mask.dims();
        let pixels: Vec<(usize, usize)> = (0..w * h)
            .filter(|&p| mask.data()[p])
            .map(|p| (p / w, p % w))
            .collect();
        let target = &inpaint.frames[&k];
        for rec in rast.weights(&pixels)? {
            let t = *target.get(rec.pixel.0, rec.pixel.1);
            records.push((rec.entries, t));
        }
    }
    let mut colors: Vec<[f64; 3]> = scene.primitives().iter().map(|p| p.color()).collect();
    // Σ_p w_ip Σ_j w_jp bounds the Hessian's row sums, so steps scaled by
    // its inverse never overshoot
    let mut diag = vec![0.0; n];
    for (entries, _) in &records {
        let total: f64 = entries.iter().map(|e| e.1).sum();
        for &(i, w) in entries {
            diag[i] += w * total;
        }
    }
    let bg = opts.background;
    for _ in 0..cfg.refine_iters {
        let grads: Vec<[f64; 3]> = records
            .par_iter()
            .fold(
                || vec![[0.0; 3]; n],
                |mut g, (entries, t)| {
                    let mut c = [0.0; 3];
                    let mut wsum = 0.0;
                    for &(i, w) in entries {
                        for ch in 0..3 {
                            c[ch] += w * colors[i][ch];
                        }
                        wsum += w;
                    }
                    for ch in 0..3 {
                        let r = c[ch] + (1.0 - wsum) * bg[ch] - t[ch];
                        for &(i, w) in entries {
                            g[i][ch] += w * r;
                        }
                    }
                    g
                },
            )
            .reduce(
                || vec![[0.0; 3]; n],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        for ch in 0..3 {
                            x[ch] += y[ch];
                        }
                    }
                    a
                },
            );
        for i in first_new..n {
            if diag[i] <= 0.0 {
                continue;
            }
            for ch in 0..3 {
                colors[i][ch] = (colors[i][ch] - grads[i][ch] / diag[i]).clamp(0.0, 1.0);
            }
        }
    }
    scene.map_primitives(|i, p| {
        if i >= first_new {
            p.set_color(colors[i]);
        }
    });
    Ok(())
}

/// Fill masked pixels from their surroundings: known colours are first
/// propagated inward ring by ring, then `iterations` rounds of neighbour
/// averaging smooth the fill while unmasked pixels stay fixed.
pub fn diffusion_fill(rgb: &RgbImage, mask: &Mask, iterations: usize) -> Result<RgbImage> {
    if rgb.dims() != mask.dims() {
        return Err(Error::Argument("image and mask sizes differ".into()));
    }
    let (w, h) = rgb.dims();
    let mut img = rgb.clone();
    if !mask.any() {
        return Ok(img);
    }
    if mask.count() == mask.len() {
        return Err(Error::Data("the whole frame is masked; nothing to diffuse from".into()));
    }
    let neighbours = |p: usize| {
        let (r, c) = (p / w, p % w);
        let mut v = [usize::MAX; 4];
        if r > 0 {
            v[0] = p - w;
        }
        if r + 1 < h {
            v[1] = p + w;
        }
        if c > 0 {
            v[2] = p - 1;
        }
        if c + 1 < w {
            v[3] = p + 1;
        }
        v
    };
    let mut known: Vec<bool> = mask.data().iter().map(|m| !m).collect();
    let mut front: Vec<usize> = (0..w * h).filter(|&p| !known[p]).collect();
    while !front.is_empty() {
        let updates: Vec<(usize, [f64; 3])> = front
            .iter()
            .filter_map(|&p| {
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for q in neighbours(p) {
                    if q != usize::MAX && known[q] {
                        let c = img.data()[q];
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                        n += 1.0;
                    }
                }
                (n > 0.0).then(|| (p, acc.map(|a| a / n)))
            })
            .collect();
        for &(p, c) in &updates {
            img.data_mut()[p] = c;
            known[p] = true;
        }
        front.retain(|&p| !known[p]);
    }
    let holes: Vec<usize> = (0..w * h).filter(|&p| mask.data()[p]).collect();
    for _ in 0..iterations {
        let next: Vec<[f64; 3]> = holes
            .iter()
            .map(|&p| {
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for q in neighbours(p) {
                    if q != usize::MAX {
                        let c = img.data()[q];
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                        n += 1.0;
                    }
                }
                acc.map(|a| a / n)
            })
            .collect();
        for (&p, c) in holes.iter().zip(next) {
            img.data_mut()[p] = c;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockInpainter;
    use crate::scene::CameraFrame;
    use nalgebra::{Matrix3, Vector3};

    struct ConstDepth(f64);

    impl DepthEstimator for ConstDepth {
        fn depth(&self, _frame: u32, rgb: &RgbImage) -> Result<ScalarImage> {
            Ok(ScalarImage::filled(rgb.width(), rgb.height(), self.0))
        }
    }

    /// Returns garbage everywhere, to check the module enforces identity.
    struct Scribble;

    impl Inpainter for Scribble {
        fn inpaint(&self, _frame: u32, rgb: &RgbImage, _mask: &Mask) -> Result<RgbImage> {
            Ok(RgbImage::filled(rgb.width(), rgb.height(), [1.0, 0.0, 1.0]))
        }
    }

    fn square_mask(w: usize, h: usize, r0: usize, r1: usize) -> Mask {
        let mut m = Mask::filled(w, h, false);
        for r in r0..r1 {
            for c in r0..r1 {
                m.set(r, c, true);
            }
        }
        m
    }

    #[test]
    fn keyframes_every_k() {
        let frames: Vec<u32> = (0..31).collect();
        assert_eq!(select_keyframes(&frames, 10), vec![0, 10, 20, 30]);
        assert_eq!(select_keyframes(&[5, 1, 3], 1), vec![1, 3, 5]);
    }

    #[test]
    fn fuse_rejects_scenes_without_objects() {
        let s = GaussianScene::new(vec![GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.9, [1.0; 3])]);
        let cam = CameraFrame::new(Matrix3::identity(), Vector3::zeros(), [20.0, 20.0, 8.0, 8.0], 16, 16, 0).unwrap();
        let traj = Trajectory::new(vec![cam]).unwrap();
        assert!(matches!(
            fuse_masks(&s, &traj, 3, &RenderOptions::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn outside_mask_identity_is_enforced() {
        let mut frames = BTreeMap::new();
        let img = RgbImage::filled(12, 12, [0.2, 0.4, 0.6]);
        frames.insert(0, img.clone());
        frames.insert(1, img.clone());
        let mut masks = BTreeMap::new();
        masks.insert(0, square_mask(12, 12, 3, 6));
        masks.insert(1, Mask::filled(12, 12, false));
        let set = CompleteMaskSet {
            masks,
            dilation_radius: 0,
        };
        let res = inpaint_background(&frames, &set, &Scribble, &ConstDepth(2.0), 10, 2).unwrap();
        let f0 = &res.frames[&0];
        for (p, m) in set.masks[&0].data().iter().enumerate() {
            if *m {
                assert_eq!(f0.data()[p], [1.0, 0.0, 1.0]);
            } else {
                assert_eq!(f0.data()[p], img.data()[p]);
            }
        }
        // empty mask: untouched
        assert_eq!(res.frames[&1], img);
        assert_eq!(res.keyframes, vec![0]);
    }

    #[test]
    fn diffusion_recovers_a_constant_wall() {
        let wall = [0.31, 0.62, 0.17];
        let mut img = RgbImage::filled(40, 40, wall);
        let mask = square_mask(40, 40, 10, 30);
        for (p, m) in mask.data().iter().enumerate() {
            if *m {
                img.data_mut()[p] = [0.9, 0.1, 0.9];
            }
        }
        let out = MockInpainter { iterations: 200 }.inpaint(0, &img, &mask).unwrap();
        let err = out
            .data()
            .iter()
            .flat_map(|c| (0..3).map(move |k| (c[k] - wall[k]).abs()))
            .fold(0.0, f64::max);
        assert!(err <= 2.0 / 255.0, "{err}");
    }

    #[test]
    fn single_pixel_lifts_along_the_optical_axis() {
        // 1x1 camera at the origin looking down +z
        let cam = CameraFrame::new(Matrix3::identity(), Vector3::zeros(), [10.0, 10.0, 0.5, 0.5], 1, 1, 0).unwrap();
        let traj = Trajectory::new(vec![cam]).unwrap();
        let mut masks = BTreeMap::new();
        masks.insert(0, Mask::filled(1, 1, true));
        let set = CompleteMaskSet {
            masks,
            dilation_radius: 0,
        };
        let mut frames = BTreeMap::new();
        frames.insert(0, RgbImage::filled(1, 1, [0.5, 0.5, 0.5]));
        let mut depths = BTreeMap::new();
        depths.insert(0, ScalarImage::filled(1, 1, 3.0));
        let res = InpaintResult {
            frames,
            keyframes: vec![0],
            keyframe_depths: depths,
        };
        let cfg = RestoreConfig {
            refine_iters: 0,
            ..Default::default()
        };
        let out = reinit_gaussians(&res, &set, &traj, &GaussianScene::default(), &cfg, &RenderOptions::default()).unwrap();
        assert_eq!(out.len(), 1);
        let c = out.primitives()[0].center();
        assert!((c - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-6);
        assert!((out.primitives()[0].scale().x - 0.3).abs() < 1e-6);
    }

    #[test]
    fn nothing_masked_leaves_background_unchanged() {
        let cam = CameraFrame::new(Matrix3::identity(), Vector3::zeros(), [10.0, 10.0, 2.0, 2.0], 4, 4, 0).unwrap();
        let traj = Trajectory::new(vec![cam]).unwrap();
        let bg = GaussianScene::new(vec![GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.9, [1.0; 3])]);
        let mut masks = BTreeMap::new();
        masks.insert(0, Mask::filled(4, 4, false));
        let set = CompleteMaskSet {
            masks,
            dilation_radius: 0,
        };
        let mut frames = BTreeMap::new();
        frames.insert(0, RgbImage::filled(4, 4, [0.5; 3]));
        let res = InpaintResult {
            frames,
            keyframes: vec![0],
            keyframe_depths: BTreeMap::new(),
        };
        let out = reinit_gaussians(&res, &set, &traj, &bg, &RestoreConfig::default(), &RenderOptions::default()).unwrap();
        assert_eq!(out.primitives(), bg.primitives());
    }

    #[test]
    fn all_invalid_depths_is_a_data_error() {
        let cam = CameraFrame::new(Matrix3::identity(), Vector3::zeros(), [10.0, 10.0, 2.0, 2.0], 4, 4, 0).unwrap();
        let traj = Trajectory::new(vec![cam]).unwrap();
        let mut masks = BTreeMap::new();
        masks.insert(0, Mask::filled(4, 4, true));
        let set = CompleteMaskSet {
            masks,
            dilation_radius: 0,
        };
        let mut frames = BTreeMap::new();
        frames.insert(0, RgbImage::filled(4, 4, [0.5; 3]));
        let mut depths = BTreeMap::new();
        depths.insert(0, ScalarImage::filled(4, 4, f64::NAN));
        let res = InpaintResult {
            frames,
            keyframes: vec![0],
            keyframe_depths: depths,
        };
        assert!(matches!(
            reinit_gaussians(&res, &set, &traj, &GaussianScene::default(), &RestoreConfig::default(), &RenderOptions::default()),
            Err(Error::Data(_))
        ));
    }
}
