//! Closed visual hull from one masked view with depth; stands in for a
//! learned single-image generator.
//!
//! The visible surface is lifted from the depth map on the grid of pixel
//! corners. The hidden side is guessed by reflecting the visible surface
//! through the centre of its silhouette rim, which is exact for centrally
//! symmetric solids seen orthographically. Front and back shells share the
//! mask outline and are joined by side walls, so the mesh is closed by
//! construction.

use std::collections::VecDeque;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::collision::CollisionMesh;
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage, ScalarImage};
use crate::scene::{CameraFrame, GaussianPrimitive, GaussianScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HullConfig {
    /// Slab thickness for flat fronts, as a fraction of the smaller extent.
    pub thickness_fraction: f64,
    /// Thinnest allowed hull, as a fraction of the smaller extent.
    pub min_thickness_fraction: f64,
    /// Depth relief below this fraction of the larger extent counts as flat.
    pub flat_tolerance: f64,
    pub opacity: f64,
    /// Normal-to-tangent scale ratio of the surface discs.
    pub flatness: f64,
    /// Upper bound on the number of surface discs; the lattice is widened
    /// to fit.
    pub max_splats: usize,
}

impl Default for HullConfig {
    fn default() -> Self {
        Self {
            thickness_fraction: 0.25,
            min_thickness_fraction: 0.02,
            flat_tolerance: 0.05,
            opacity: 0.95,
            flatness: 0.3,
            max_splats: 1500,
        }
    }
}

impl HullConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.thickness_fraction > 0.0
            && self.min_thickness_fraction > 0.0
            && self.flat_tolerance >= 0.0
            && self.opacity > 0.0
            && self.opacity < 1.0
            && self.flatness > 0.0
            && self.max_splats > 0;
        if !ok {
            return Err(Error::Config(format!("invalid hull settings {self:?}")));
        }
        Ok(())
    }
}

/// Largest 4-connected component, hole-free and without pixels that touch
/// only diagonally, which would pinch the outline into a non-manifold vertex.
pub fn clean_mask(mask: &Mask) -> Mask {
    let mut m = mask.clone();
    while fix_diagonals(&mut m) {}
    loop {
        m = fill_holes(&largest_component(&m));
        if !fix_diagonals(&mut m) {
            return m;
        }
    }
}

fn components(mask: &Mask, value: bool) -> Vec<Vec<usize>> {
    let (w, h) = mask.dims();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || mask.data()[start] != value {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && mask.data()[q] == value {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

fn largest_component(mask: &Mask) -> Mask {
    let (w, h) = mask.dims();
    let mut out = Mask::filled(w, h, false);
    // first-found wins ties, which keeps the choice deterministic
    let mut best: Option<Vec<usize>> = None;
    for comp in components(mask, true) {
        if best.as_ref().map_or(true, |b| comp.len() > b.len()) {
            best = Some(comp);
        }
    }
    for p in best.unwrap_or_default() {
        out.data_mut()[p] = true;
    }
    out
}

fn fill_holes(mask: &Mask) -> Mask {
    let (w, h) = mask.dims();
    let mut out = mask.clone();
    for comp in components(mask, false) {
        let touches_border = comp.iter().any(|&p| {
            let (r, c) = (p / w, p % w);
            r == 0 || c == 0 || r + 1 == h || c + 1 == w
        });
        if !touches_border {
            for p in comp {
                out.data_mut()[p] = true;
            }
        }
    }
    out
}

fn fix_diagonals(mask: &mut Mask) -> bool {
    let (w, h) = mask.dims();
    let mut changed = false;
    for r in 0..h.saturating_sub(1) {
        for c in 0..w.saturating_sub(1) {
            let a = *mask.get(r, c);
            let b = *mask.get(r, c + 1);
            let cc = *mask.get(r + 1, c);
            let d = *mask.get(r + 1, c + 1);
            if a && d && !b && !cc {
                mask.set(r, c + 1, true);
                changed = true;
            } else if b && cc && !a && !d {
                mask.set(r, c, true);
                changed = true;
            }
        }
    }
    changed
}

/// Closed hull in a gravity-aligned frame: +y along `up`, +z pointing
/// horizontally at the camera, origin at the mean of the visible surface.
pub fn visual_hull(
    rgb: &RgbImage,
    mask: &Mask,
    depth: &ScalarImage,
    cam: &CameraFrame,
    up: &Vector3<f64>,
    cfg: &HullConfig,
) -> Result<(GaussianScene, CollisionMesh)> {
    cfg.validate()?;
    let (w, h) = mask.dims();
    if rgb.dims() != (w, h) || depth.dims() != (w, h) || (cam.width as usize, cam.height as usize) != (w, h) {
        return Err(Error::Argument("image, mask, depth and camera sizes differ".into()));
    }
    let valid = Mask::from_vec(
        w,
        h,
        (0..w * h)
            .map(|p| mask.data()[p] && depth.data()[p].is_finite() && depth.data()[p] > 0.0)
            .collect(),
    )?;
    let m = clean_mask(&valid);
    if !m.any() {
        return Err(Error::Argument("empty mask: nothing to extrude".into()));
    }

    // Corner grid: corner (r, c) touches pixels (r-1|r, c-1|c).
    let cw = w + 1;
    let pixel = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && *m.get(r as usize, c as usize);
    let mut corner_id = vec![usize::MAX; (h + 1) * cw];
    let mut corners: Vec<(usize, usize)> = Vec::new();
    let mut front_z = Vec::new();
    let mut color = Vec::new();
    let mut on_rim = Vec::new();
    for r in 0..=h {
        for c in 0..=w {
            let adj = [(r as isize - 1, c as isize - 1), (r as isize - 1, c as isize), (r as isize, c as isize - 1), (r as isize, c as isize)];
            let inside: Vec<(usize, usize)> = adj
                .iter()
                .filter(|(rr, cc)| pixel(*rr, *cc))
                .map(|&(rr, cc)| (rr as usize, cc as usize))
                .collect();
            if inside.is_empty() {
                continue;
            }
            corner_id[r * cw + c] = corners.len();
            corners.push((r, c));
            let n = inside.len() as f64;
            front_z.push(inside.iter().map(|&(rr, cc)| *depth.get(rr, cc)).sum::<f64>() / n);
            let mut col = [0.0; 3];
            for &(rr, cc) in &inside {
                let px = rgb.get(rr, cc);
                for k in 0..3 {
                    col[k] += px[k] / n;
                }
            }
            color.push(col);
            on_rim.push(inside.len() < 4);
        }
    }
    let to_cam = |r: f64, c: f64, z: f64| Vector3::new((c - cam.cx) / cam.fx * z, (r - cam.cy) / cam.fy * z, z);
    let front: Vec<Vector3<f64>> = corners
        .iter()
        .zip(&front_z)
        .map(|(&(r, c), &z)| to_cam(r as f64, c as f64, z))
        .collect();

    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in &front {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    let small = extent.x.min(extent.y).max(f64::MIN_POSITIVE);
    let large = extent.x.max(extent.y);
    let t_min = cfg.min_thickness_fraction * small;
    let flat = extent.z <= cfg.flat_tolerance * large;

    let rim: Vec<usize> = (0..corners.len()).filter(|&i| on_rim[i]).collect();
    let center = rim.iter().map(|&i| front[i]).sum::<Vector3<f64>>() / rim.len() as f64;
    let (uc, vc) = (center.x / center.z * cam.fx + cam.cx, center.y / center.z * cam.fy + cam.cy);

    // nearest corner to an arbitrary grid position
    let nearest = |r: f64, c: f64| -> usize {
        let (ri, ci) = (r.round(), c.round());
        if ri >= 0.0 && ci >= 0.0 && (ri as usize) <= h && (ci as usize) <= w {
            let id = corner_id[ri as usize * cw + ci as usize];
            if id != usize::MAX {
                return id;
            }
        }
        (0..corners.len())
            .min_by(|&a, &b| {
                let da = (corners[a].0 as f64 - r).powi(2) + (corners[a].1 as f64 - c).powi(2);
                let db = (corners[b].0 as f64 - r).powi(2) + (corners[b].1 as f64 - c).powi(2);
                da.total_cmp(&db)
            })
            .expect("mask is nonempty")
    };

    let mut back = Vec::with_capacity(corners.len());
    let mut back_color = Vec::with_capacity(corners.len());
    for (i, &(r, c)) in corners.iter().enumerate() {
        if flat {
            // a straight extrusion away from the camera
            back.push(front[i] + Vector3::new(0.0, 0.0, cfg.thickness_fraction * small));
            back_color.push(color[i]);
        } else {
            let j = nearest(2.0 * vc - r as f64, 2.0 * uc - c as f64);
            let z = (2.0 * center.z - front_z[j]).max(front_z[i] + t_min);
            back.push(to_cam(r as f64, c as f64, z));
            back_color.push(color[j]);
        }
    }

    // Faces: front shell faces the camera, back shell is reversed, walls
    // close every outline edge.
    let n = corners.len() as u32;
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !*m.get(r, c) {
                continue;
            }
            let tl = corner_id[r * cw + c] as u32;
            let tr = corner_id[r * cw + c + 1] as u32;
            let bl = corner_id[(r + 1) * cw + c] as u32;
            let br = corner_id[(r + 1) * cw + c + 1] as u32;
            faces.push([tl, bl, tr]);
            faces.push([tr, bl, br]);
            faces.push([n + tl, n + tr, n + bl]);
            faces.push([n + tr, n + br, n + bl]);
        }
    }
    let front_faces: Vec<[u32; 3]> = faces.iter().copied().filter(|f| f[0] < n).collect();
    let mut directed = std::collections::HashSet::new();
    for f in &front_faces {
        for k in 0..3 {
            directed.insert((f[k], f[(k + 1) % 3]));
        }
    }
    for f in &front_faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            if !directed.contains(&(b, a)) {
                faces.push([b, a, n + a]);
                faces.push([b, n + a, n + b]);
            }
        }
    }

    // gravity-aligned generator frame
    let up = up.try_normalize(1e-12).ok_or_else(|| Error::Argument("zero up vector".into()))?;
    let world: Vec<Vector3<f64>> = front.iter().chain(&back).map(|p| cam.camera_to_world(p)).collect();
    let origin = world[..front.len()].iter().sum::<Vector3<f64>>() / front.len() as f64;
    let toward = cam.center() - origin;
    let mut z_axis = toward - up * up.dot(&toward);
    if z_axis.norm() < 1e-9 * toward.norm().max(1.0) {
        let fwd = cam.rotation().row(2).transpose();
        z_axis = -(fwd - up * up.dot(&fwd));
    }
    let z_axis = z_axis.try_normalize(1e-12).unwrap_or_else(|| up.cross(&Vector3::x()).normalize());
    let x_axis = up.cross(&z_axis);
    let frame = Matrix3::from_rows(&[x_axis.transpose(), up.transpose(), z_axis.transpose()]);
    let vertices: Vec<Vector3<f64>> = world.iter().map(|p| frame * (p - origin)).collect();

    let mut mesh = CollisionMesh::new(vertices, faces);
    mesh.colors = color.iter().chain(&back_color).copied().collect();
    mesh.check_watertight()?;

    let pixel = front_z.iter().sum::<f64>() / front_z.len() as f64 / cam.fx;
    Ok((surface_gaussians(&mesh, capped_spacing(&mesh, pixel, cfg.max_splats), cfg), mesh))
}

fn lattice_side(longest: f64, spacing: f64) -> usize {
    ((longest / spacing).ceil() as usize).max(1)
}

/// Widen `spacing` until the lattice holds at most `max_splats` discs.
/// Every face gets at least one, so the cap never goes below the face count.
pub fn capped_spacing(mesh: &CollisionMesh, spacing: f64, max_splats: usize) -> f64 {
    let faces: Vec<(f64, f64)> = (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.corners(f);
            let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
            (longest, 0.5 * (b - a).cross(&(c - a)).norm())
        })
        .collect();
    let count = |s: f64| {
        let (mut lattice, mut small) = (0usize, 0.0);
        for &(l, area) in &faces {
            match lattice_side(l, s) {
                1 => small += area / cell_area(s),
                k => lattice += k * k,
            }
        }
        lattice + small as usize
    };
    let mut s = spacing;
    for _ in 0..64 {
        let n = count(s);
        if n <= max_splats {
            break;
        }
        s *= (n as f64 / max_splats as f64).sqrt().max(1.05);
    }
    s
}

fn cell_area(spacing: f64) -> f64 {
    0.5 * spacing * spacing
}

/// Flat discs tiling every face on a barycentric lattice of about `spacing`.
/// Faces smaller than one lattice cell pool their area in mesh order and
/// get a disc at their centroid whenever a full cell has accumulated.
pub fn surface_gaussians(mesh: &CollisionMesh, spacing: f64, cfg: &HullConfig) -> GaussianScene {
    let mut prims = Vec::new();
    let mut pooled = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.corners(f);
        let raw = (b - a).cross(&(c - a));
        let area = 0.5 * raw.norm();
        if area <= 0.0 {
            continue;
        }
        let normal = raw / (2.0 * area);
        let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
        let k = lattice_side(longest, spacing);
        let mut sigma = 0.5 * (area / (k * k) as f64).sqrt();
        if k == 1 {
            pooled += area / cell_area(spacing);
            if pooled < 1.0 {
                continue;
            }
            pooled -= 1.0;
            sigma = sigma.max(0.5 * cell_area(spacing).sqrt());
        }
        let rot = UnitQuaternion::rotation_between(&Vector3::z(), &normal)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
        let ids = mesh.faces[f].map(|i| i as usize);
        let colors = ids.map(|i| mesh.colors.get(i).copied().unwrap_or([0.5; 3]));
        let mut emit = |u: f64, v: f64| {
            let wgt = [1.0 - u - v, u, v];
            let p = a * wgt[0] + b * wgt[1] + c * wgt[2];
            let mut col = [0.0; 3];
            for (cw, wt) in colors.iter().zip(wgt) {
                for ch in 0..3 {
                    col[ch] += cw[ch] * wt;
                }
            }
            prims.push(GaussianPrimitive::new(
                p,
                Vector3::new(sigma, sigma, cfg.flatness * sigma),
                rot,
                cfg.opacity,
                col,
            ));
        };
        let kf = k as f64;
        for i in 0..k {
            for j in 0..k - i {
                emit((i as f64 + 1.0 / 3.0) / kf, (j as f64 + 1.0 / 3.0) / kf);
                if i + j + 1 < k {
                    emit((i as f64 + 2.0 / 3.0) / kf, (j as f64 + 2.0 / 3.0) / kf);
                }
            }
        }
    }
    GaussianScene::new(prims)
}
