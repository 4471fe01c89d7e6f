//! Depth-sorted alpha compositing of projected Gaussians.
//!
//! Each splat is projected with the first-order (Jacobian) approximation of
//! its covariance. For a pixel p the effective opacity is
//! `alpha'(p) = opacity * falloff(d2)` where `d2` is the squared Mahalanobis
//! distance in screen space, and the compositing weight of the i-th splat in
//! depth order is `alpha'_i * prod_{j<i} (1 - alpha'_j)`.

use nalgebra::{Matrix2x3, Matrix3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Rect, RgbImage, ScalarImage};
use crate::scene::{CameraFrame, GaussianPrimitive, GaussianScene};

/// Shape of the screen-space kernel beyond its Gaussian core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Falloff {
    /// `exp(-d2/2)`, zero past the cutoff radius.
    Truncated,
    /// Gaussian shifted down so it reaches zero continuously at the cutoff.
    /// Used where finite differences of the image are taken.
    Smooth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub near: f64,
    pub far: f64,
    /// Effective opacities below this value are dropped.
    pub opacity_floor: f64,
    /// Kernel support radius in standard deviations.
    pub cutoff_sigma: f64,
    /// Added to the diagonal of every projected covariance (pixels^2).
    pub screen_dilation: f64,
    pub background: [f64; 3],
    pub falloff: Falloff,
    pub tile_size: usize,
    /// The projection Jacobian is evaluated no further outside the image
    /// than this fraction of its size; keeps splats just past the near plane
    /// and far off-axis from smearing across the whole frame.
    pub guard_band: f64,
    /// Stop compositing a pixel once its transmittance falls below this.
    /// Zero composites every splat.
    pub min_transmittance: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            near: 0.01,
            far: 1.0e4,
            opacity_floor: 1.0 / 255.0,
            cutoff_sigma: 3.0,
            screen_dilation: 0.0,
            background: [0.0; 3],
            falloff: Falloff::Truncated,
            tile_size: 16,
            guard_band: 0.15,
            min_transmittance: 0.0,
        }
    }
}

impl RenderOptions {
    /// Continuous kernel without an opacity floor.
    pub fn smooth() -> Self {
        Self {
            opacity_floor: 0.0,
            falloff: Falloff::Smooth,
            ..Self::default()
        }
    }

    #[inline]
    pub fn effective_alpha(&self, opacity: f64, d2: f64) -> f64 {
        Kernel::new(self).alpha(opacity, d2)
    }
}

/// Falloff constants resolved once per rasterizer.
#[derive(Clone, Copy, Debug)]
struct Kernel {
    cut2: f64,
    floor: f64,
    opacity_floor: f64,
}

impl Kernel {
    fn new(opts: &RenderOptions) -> Self {
        let cut2 = opts.cutoff_sigma * opts.cutoff_sigma;
        Self {
            cut2,
            floor: match opts.falloff {
                Falloff::Truncated => 0.0,
                Falloff::Smooth => (-0.5 * cut2).exp(),
            },
            opacity_floor: opts.opacity_floor,
        }
    }

    #[inline]
    fn alpha(&self, opacity: f64, d2: f64) -> f64 {
        if !(d2 <= self.cut2) {
            return 0.0;
        }
        let g = if self.floor == 0.0 {
            (-0.5 * d2).exp()
        } else {
            (((-0.5 * d2).exp() - self.floor) / (1.0 - self.floor)).max(0.0)
        };
        let a = opacity * g;
        if a < self.opacity_floor {
            0.0
        } else {
            a
        }
    }
}

/// A splat with activated parameters in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    pub center: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Splat {
    pub fn from_primitive(p: &GaussianPrimitive) -> Self {
        Self {
            center: p.center(),
            covariance: p.covariance(),
            opacity: p.opacity(),
            color: p.color(),
        }
    }

    /// Image of the splat under x -> scale * R x + t.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>, scale: f64) -> Self {
        Self {
            center: rotation * self.center * scale + translation,
            covariance: rotation * self.covariance * rotation.transpose() * (scale * scale),
            opacity: self.opacity,
            color: self.color,
        }
    }
}

pub fn splats(scene: &GaussianScene) -> Vec<Splat> {
    scene.primitives().iter().map(Splat::from_primitive).collect()
}

pub fn transform_splats(
    splats: &[Splat],
    rotation: &UnitQuaternion<f64>,
    translation: &Vector3<f64>,
    scale: f64,
) -> Vec<Splat> {
    let r = rotation.to_rotation_matrix().into_inner();
    splats.iter().map(|s| s.transformed(&r, translation, scale)).collect()
}

/// Screen-space footprint of one splat.
#[derive(Clone, Debug)]
pub struct Projected {
    pub index: usize,
    pub depth: f64,
    pub mean: [f64; 2],
    /// Inverse 2D covariance (a, b, c): d2 = a dx^2 + 2 b dx dy + c dy^2.
    pub conic: [f64; 3],
    pub opacity: f64,
    /// Inclusive pixel bounds (col0, row0, col1, row1) of the kernel support.
    bounds: [i64; 4],
}

impl Projected {
    #[inline]
    pub fn mahalanobis2(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }
}

/// Clamp normalized image-plane coordinates to the guard band.
pub(crate) fn guarded_tangents(cam: &CameraFrame, u: f64, v: f64, band: f64) -> (f64, f64) {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let ulo = (-band * w - cam.cx) / cam.fx;
    let uhi = ((1.0 + band) * w - cam.cx) / cam.fx;
    let vlo = (-band * h - cam.cy) / cam.fy;
    let vhi = ((1.0 + band) * h - cam.cy) / cam.fy;
    (u.clamp(ulo, uhi), v.clamp(vlo, vhi))
}

pub fn project(splat: &Splat, index: usize, cam: &CameraFrame, opts: &RenderOptions) -> Option<Projected> {
    let p = cam.world_to_camera(&splat.center);
    let z = p.z;
    if !(z >= opts.near && z <= opts.far) || splat.opacity <= 0.0 {
        return None;
    }
    let (u, v) = guarded_tangents(cam, p.x / z, p.y / z, opts.guard_band);
    let j = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * u / z, 0.0, cam.fy / z, -cam.fy * v / z);
    let t = j * cam.rotation();
    let cov2 = t * splat.covariance * t.transpose();
    let s00 = cov2[(0, 0)] + opts.screen_dilation;
    let s01 = cov2[(0, 1)];
    let s11 = cov2[(1, 1)] + opts.screen_dilation;
    let det = s00 * s11 - s01 * s01;
    if !(det > 0.0) {
        return None;
    }
    let conic = [s11 / det, -s01 / det, s00 / det];
    let mean = [cam.fx * p.x / z + cam.cx, cam.fy * p.y / z + cam.cy];
    let mid = 0.5 * (s00 + s11);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = opts.cutoff_sigma * lambda_max.sqrt() + 1.0;
    // pixel centres sit at integer + 0.5
    let bounds = [
        (mean[0] - radius - 0.5).floor() as i64,
        (mean[1] - radius - 0.5).floor() as i64,
        (mean[0] + radius - 0.5).ceil() as i64,
        (mean[1] + radius - 0.5).ceil() as i64,
    ];
    if bounds[2] < 0 || bounds[3] < 0 || bounds[0] >= cam.width as i64 || bounds[1] >= cam.height as i64 {
        return None;
    }
    Some(Projected {
        index,
        depth: z,
        mean,
        conic,
        opacity: splat.opacity,
        bounds,
    })
}

#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub color: RgbImage,
    /// Weight-averaged camera depth of the composited splats; 0 where alpha is 0.
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
}

/// Per-pixel compositing weights in depth order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub pixel: (usize, usize),
    pub entries: Vec<(usize, f64)>,
}

/// Splats binned into screen tiles, sorted front to back.
pub struct Rasterizer<'a> {
    cam: &'a CameraFrame,
    opts: RenderOptions,
    kernel: Kernel,
    projected: Vec<Projected>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl<'a> Rasterizer<'a> {
    pub fn new(splats: &[Splat], cam: &'a CameraFrame, opts: &RenderOptions) -> Self {
        let mut projected: Vec<Projected> = splats
            .par_iter()
            .enumerate()
            .filter_map(|(i, s)| project(s, i, cam, opts))
            .collect();
        projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

        let ts = opts.tile_size.max(1);
        let (w, h) = (cam.width as usize, cam.height as usize);
        let tiles_x = w.div_ceil(ts);
        let tiles_y = h.div_ceil(ts);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (k, p) in projected.iter().enumerate() {
            let c0 = p.bounds[0].max(0) as usize / ts;
            let r0 = p.bounds[1].max(0) as usize / ts;
            let c1 = (p.bounds[2].min(w as i64 - 1) as usize) / ts;
            let r1 = (p.bounds[3].min(h as i64 - 1) as usize) / ts;
            for ty in r0..=r1 {
                for tx in c0..=c1 {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Self {
            cam,
            opts: *opts,
            kernel: Kernel::new(opts),
            projected,
            tiles,
            tiles_x,
        }
    }

    pub fn camera(&self) -> &CameraFrame {
        self.cam
    }

    pub fn projected(&self) -> &[Projected] {
        &self.projected
    }

    /// Visit (splat index, weight, depth) front to back; returns the final transmittance.
    #[inline]
    pub fn composite<F: FnMut(usize, f64, f64)>(&self, row: usize, col: usize, mut visit: F) -> f64 {
        let ts = self.opts.tile_size.max(1);
        let tile = &self.tiles[(row / ts) * self.tiles_x + col / ts];
        let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
        let mut transmittance = 1.0;
        for &k in tile {
            let p = &self.projected[k as usize];
            let a = self.kernel.alpha(p.opacity, p.mahalanobis2(px, py));
            if a <= 0.0 {
                continue;
            }
            visit(p.index, transmittance * a, p.depth);
            transmittance *= 1.0 - a;
            if transmittance < self.opts.min_transmittance {
                break;
            }
        }
        transmittance
    }

    fn check_pixel(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.cam.height as usize || col >= self.cam.width as usize {
            return Err(Error::Argument(format!(
                "pixel ({row}, {col}) outside {}x{} frame",
                self.cam.width, self.cam.height
            )));
        }
        Ok(())
    }

    pub fn render(&self, splats: &[Splat]) -> RenderedFrame {
        let (w, h) = (self.cam.width as usize, self.cam.height as usize);
        let bg = self.opts.background;
        let rows: Vec<Vec<([f64; 3], f64, f64)>> = (0..h)
            .into_par_iter()
            .map(|row| {
                (0..w)
                    .map(|col| {
                        let mut c = [0.0; 3];
                        let mut d = 0.0;
                        let mut wsum = 0.0;
                        self.composite(row, col, |i, wt, z| {
                            let sc = &splats[i].color;
                            c[0] += wt * sc[0];
                            c[1] += wt * sc[1];
                            c[2] += wt * sc[2];
                            d += wt * z;
                            wsum += wt;
                        });
                        let rest = 1.0 - wsum;
                        let color = [c[0] + rest * bg[0], c[1] + rest * bg[1], c[2] + rest * bg[2]];
                        let depth = if wsum > 0.0 { d / wsum } else { 0.0 };
                        (color, depth, wsum)
                    })
                    .collect()
            })
            .collect();
        let mut color = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        let mut alpha = Vec::with_capacity(w * h);
        for row in rows {
            for (c, d, a) in row {
                color.push(c);
                depth.push(d);
                alpha.push(a);
            }
        }
        RenderedFrame {
            color: Image::from_vec(w, h, color).expect("sized"),
            depth: Image::from_vec(w, h, depth).expect("sized"),
            alpha: Image::from_vec(w, h, alpha).expect("sized"),
        }
    }

    /// Σ_i w_i s_i over the pixels of `rect`, row-major within the rectangle.
    pub fn weighted_sum_region(&self, scores: Option<&[f64]>, rect: Rect) -> Vec<f64> {
        (rect.row0..rect.row1)
            .into_par_iter()
            .flat_map_iter(|row| {
                (rect.col0..rect.col1).map(move |col| {
                    let mut acc = 0.0;
                    self.composite(row, col, |i, w, _| {
                        acc += match scores {
                            Some(s) => w * s[i],
                            None => w,
                        };
                    });
                    acc
                })
            })
            .collect()
    }

    pub fn weights(&self, pixels: &[(usize, usize)]) -> Result<Vec<WeightRecord>> {
        for &(r, c) in pixels {
            self.check_pixel(r, c)?;
        }
        Ok(pixels
            .iter()
            .map(|&(row, col)| {
                let mut entries = Vec::new();
                self.composite(row, col, |i, w, _| entries.push((i, w)));
                WeightRecord {
                    pixel: (row, col),
                    entries,
                }
            })
            .collect())
    }

    /// Weights of every pixel in compressed row storage.
    pub fn weight_map(&self) -> WeightMap {
        let (w, h) = (self.cam.width as usize, self.cam.height as usize);
        let rows: Vec<(Vec<u32>, Vec<u32>, Vec<f64>)> = (0..h)
            .into_par_iter()
            .map(|row| {
                let mut counts = Vec::with_capacity(w);
                let mut idx = Vec::new();
                let mut wts = Vec::new();
                for col in 0..w {
                    let before = idx.len();
                    self.composite(row, col, |i, wt, _| {
                        idx.push(i as u32);
                        wts.push(wt);
                    });
                    counts.push((idx.len() - before) as u32);
                }
                (counts, idx, wts)
            })
            .collect();
        let mut offsets = Vec::with_capacity(w * h + 1);
        offsets.push(0usize);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for (counts, idx, wts) in rows {
            for c in counts {
                let last = *offsets.last().expect("nonempty");
                offsets.push(last + c as usize);
            }
            indices.extend(idx);
            weights.extend(wts);
        }
        WeightMap {
            width: w,
            height: h,
            offsets,
            indices,
            weights,
        }
    }
}

/// Compositing weights of a whole frame; pixel p owns entries
/// `offsets[p]..offsets[p + 1]`.
#[derive(Clone, Debug)]
pub struct WeightMap {
    pub width: usize,
    pub height: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl WeightMap {
    /// Assemble from explicit per-pixel records (row-major pixel ids).
    pub fn from_records(width: usize, height: usize, records: &[WeightRecord]) -> Result<Self> {
        let mut per_pixel: Vec<Vec<(usize, f64)>> = vec![Vec::new(); width * height];
        for r in records {
            let (row, col) = r.pixel;
            if row >= height || col >= width {
                return Err(Error::Argument(format!("pixel ({row}, {col}) outside {width}x{height} frame")));
            }
            per_pixel[row * width + col].extend_from_slice(&r.entries);
        }
        let mut offsets = vec![0usize];
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for entries in per_pixel {
            for (i, w) in entries {
                indices.push(i as u32);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Ok(Self {
            width,
            height,
            offsets,
            indices,
            weights,
        })
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[p], self.offsets[p + 1]);
        (&self.indices[a..b], &self.weights[a..b])
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn entry_count(&self) -> usize {
        self.indices.len()
    }
}

/// Render colour, depth and alpha of a scene from one camera.
pub fn render(scene: &GaussianScene, cam: &CameraFrame, opts: &RenderOptions) -> RenderedFrame {
    render_splats(&splats(scene), cam, opts)
}

pub fn render_splats(splats: &[Splat], cam: &CameraFrame, opts: &RenderOptions) -> RenderedFrame {
    Rasterizer::new(splats, cam, opts).render(splats)
}

pub fn render_weights(
    scene: &GaussianScene,
    cam: &CameraFrame,
    pixels: &[(usize, usize)],
    opts: &RenderOptions,
) -> Result<Vec<WeightRecord>> {
    let s = splats(scene);
    Rasterizer::new(&s, cam, opts).weights(pixels)
}

/// Soft mask Σ_i w_i(r) s_i for per-primitive scores.
pub fn render_soft_mask(
    scene: &GaussianScene,
    scores: &[f64],
    cam: &CameraFrame,
    opts: &RenderOptions,
) -> Result<ScalarImage> {
    if scores.len() != scene.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} primitives",
            scores.len(),
            scene.len()
        )));
    }
    let s = splats(scene);
    let rast = Rasterizer::new(&s, cam, opts);
    let (w, h) = (cam.width as usize, cam.height as usize);
    let values = rast.weighted_sum_region(Some(scores), Rect::full(w, h));
    Image::from_vec(w, h, values)
}

/// Standalone silhouette (accumulated alpha) of a subset.
pub fn render_silhouette(subset: &GaussianScene, cam: &CameraFrame, opts: &RenderOptions) -> ScalarImage {
    render_silhouette_splats(&splats(subset), cam, opts)
}

pub fn render_silhouette_splats(splats: &[Splat], cam: &CameraFrame, opts: &RenderOptions) -> ScalarImage {
    let rast = Rasterizer::new(splats, cam, opts);
    let (w, h) = (cam.width as usize, cam.height as usize);
    Image::from_vec(w, h, rast.weighted_sum_region(None, Rect::full(w, h))).expect("sized")
}

/// Silhouette of the `members` subset occluded by the rest of `scene`.
pub fn render_silhouette_in_context(
    scene: &GaussianScene,
    members: &[bool],
    cam: &CameraFrame,
    opts: &RenderOptions,
) -> Result<ScalarImage> {
    let scores: Vec<f64> = members.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    render_soft_mask(scene, &scores, cam, opts)
}
