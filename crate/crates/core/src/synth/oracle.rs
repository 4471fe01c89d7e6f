use nalgebra::{Matrix3, Vector3};

use crate::raster::Image;
use crate::render::{Falloff, RenderOptions, RenderedFrame};
use crate::scene::{CameraFrame, GaussianScene};

/// Reference compositor: every pixel walks every Gaussian in depth order.
/// Shares only the kernel definition with the tiled renderer, not its code.
pub fn oracle_brute_render(scene: &GaussianScene, cam: &CameraFrame, opts: &RenderOptions) -> RenderedFrame {
    struct Footprint {
        mean: (f64, f64),
        inv: (f64, f64, f64),
        depth: f64,
        opacity: f64,
        color: [f64; 3],
    }
    let w_rot = cam.rotation();
    let mut feet: Vec<(f64, usize, Footprint)> = Vec::new();
    for (i, p) in scene.primitives().iter().enumerate() {
        let mu = p.center();
        let c = w_rot * mu + cam.translation();
        if c.z < opts.near || c.z > opts.far {
            continue;
        }
        let (x, y, z) = (c.x, c.y, c.z);
        // Jacobian taken at the nearest point of the guard-banded image
        let g = opts.guard_band;
        let px = (cam.fx * x / z + cam.cx).clamp(-g * cam.width as f64, (1.0 + g) * cam.width as f64);
        let py = (cam.fy * y / z + cam.cy).clamp(-g * cam.height as f64, (1.0 + g) * cam.height as f64);
        let (xj, yj) = ((px - cam.cx) / cam.fx * z, (py - cam.cy) / cam.fy * z);
        let j0 = Vector3::new(cam.fx / z, 0.0, -cam.fx * xj / (z * z));
        let j1 = Vector3::new(0.0, cam.fy / z, -cam.fy * yj / (z * z));
        let cov_cam: Matrix3<f64> = w_rot * p.covariance() * w_rot.transpose();
        let a = j0.dot(&(cov_cam * j0)) + opts.screen_dilation;
        let b = j0.dot(&(cov_cam * j1));
        let d = j1.dot(&(cov_cam * j1)) + opts.screen_dilation;
        let det = a * d - b * b;
        if det <= 0.0 {
            continue;
        }
        feet.push((
            z,
            i,
            Footprint {
                mean: (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy),
                inv: (d / det, -b / det, a / det),
                depth: z,
                opacity: p.opacity(),
                color: p.color(),
            },
        ));
    }
    feet.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)));

    let cut2 = opts.cutoff_sigma * opts.cutoff_sigma;
    let kernel = |d2: f64| -> f64 {
        if d2 > cut2 {
            return 0.0;
        }
        match opts.falloff {
            Falloff::Truncated => (-0.5 * d2).exp(),
            Falloff::Smooth => {
                let e = (-0.5 * cut2).exp();
                (((-0.5 * d2).exp() - e) / (1.0 - e)).max(0.0)
            }
        }
    };

    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut color = Image::filled(w, h, [0.0; 3]);
    let mut depth = Image::filled(w, h, 0.0);
    let mut alpha = Image::filled(w, h, 0.0);
    for row in 0..h {
        for col in 0..w {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut t = 1.0;
            let mut acc = [0.0; 3];
            let mut dz = 0.0;
            let mut wsum = 0.0;
            for (_, _, f) in &feet {
                let (dx, dy) = (px - f.mean.0, py - f.mean.1);
                let d2 = f.inv.0 * dx * dx + 2.0 * f.inv.1 * dx * dy + f.inv.2 * dy * dy;
                let mut a = f.opacity * kernel(d2);
                if a < opts.opacity_floor {
                    a = 0.0;
                }
                let wt = a * t;
                for k in 0..3 {
                    acc[k] += wt * f.color[k];
                }
                dz += wt * f.depth;
                wsum += wt;
                t *= 1.0 - a;
            }
            let bg = opts.background;
            color.set(
                row,
                col,
                [0, 1, 2].map(|k| acc[k] + (1.0 - wsum) * bg[k]),
            );
            depth.set(row, col, if wsum > 0.0 { dz / wsum } else { 0.0 });
            alpha.set(row, col, wsum);
        }
    }
    RenderedFrame { color, depth, alpha }
}
