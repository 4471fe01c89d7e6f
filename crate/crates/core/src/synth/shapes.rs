use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Solid primitive in its local frame, centred on its geometric centre with
/// +y as the vertical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
    Cylinder { radius: f64, height: f64 },
}

/// Surface sample in local coordinates with its outward normal.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceSample {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl Shape {
    pub fn half_height(&self) -> f64 {
        match *self {
            Shape::Box { size } => 0.5 * size[1],
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { height, .. } => 0.5 * height,
        }
    }

    /// Radius of the smallest vertical cylinder around the axis that contains the solid.
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Box { size } => 0.5 * (size[0] * size[0] + size[2] * size[2]).sqrt(),
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { radius, .. } => radius,
        }
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        match *self {
            Shape::Box { size } => Vector3::from(size) * 0.5,
            Shape::Sphere { radius } => Vector3::repeat(radius),
            Shape::Cylinder { radius, height } => Vector3::new(radius, 0.5 * height, radius),
        }
    }

    pub fn is_valid(&self) -> bool {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            Shape::Box { size } => size.iter().all(|&v| pos(v)),
            Shape::Sphere { radius } => pos(radius),
            Shape::Cylinder { radius, height } => pos(radius) && pos(height),
        }
    }

    /// Whether floor point (x, z) in the local frame lies under the shape,
    /// grown by `margin`.
    pub fn covers_footprint(&self, x: f64, z: f64, margin: f64) -> bool {
        match *self {
            Shape::Box { size } => x.abs() <= 0.5 * size[0] + margin && z.abs() <= 0.5 * size[2] + margin,
            // only the contact neighbourhood of a sphere is hidden from view
            Shape::Sphere { radius } => x * x + z * z <= (0.5 * radius + margin).powi(2),
            Shape::Cylinder { radius, .. } => x * x + z * z <= (radius + margin).powi(2),
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match *self {
            Shape::Box { size } => (0..3).all(|k| p[k].abs() <= 0.5 * size[k]),
            Shape::Sphere { radius } => p.norm_squared() <= radius * radius,
            Shape::Cylinder { radius, height } => {
                p.y.abs() <= 0.5 * height && p.x * p.x + p.z * p.z <= radius * radius
            }
        }
    }

    /// Nearest ray parameter t > eps at which the ray enters the solid.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match *self {
            Shape::Box { size } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    let h = 0.5 * size[k];
                    if dir[k].abs() < 1e-15 {
                        if origin[k].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let a = (-h - origin[k]) / dir[k];
                    let b = (h - origin[k]) / dir[k];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 || t1 < EPS {
                    None
                } else {
                    Some(if t0 > EPS { t0 } else { t1 })
                }
            }
            Shape::Sphere { radius } => {
                let a = dir.norm_squared();
                let b = origin.dot(dir);
                let c = origin.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = (-b - s) / a;
                let t1 = (-b + s) / a;
                [t0, t1].into_iter().find(|&t| t > EPS)
            }
            Shape::Cylinder { radius, height } => {
                let h = 0.5 * height;
                let mut best = f64::INFINITY;
                let a = dir.x * dir.x + dir.z * dir.z;
                if a > 1e-15 {
                    let b = origin.x * dir.x + origin.z * dir.z;
                    let c = origin.x * origin.x + origin.z * origin.z - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            if t > EPS && (origin.y + t * dir.y).abs() <= h {
                                best = best.min(t);
                            }
                        }
                    }
                }
                if dir.y.abs() > 1e-15 {
                    for cap in [-h, h] {
                        let t = (cap - origin.y) / dir.y;
                        let x = origin.x + t * dir.x;
                        let z = origin.z + t * dir.z;
                        if t > EPS && x * x + z * z <= radius * radius {
                            best = best.min(t);
                        }
                    }
                }
                best.is_finite().then_some(best)
            }
        }
    }

    /// Samples at roughly `density` per unit area over the solid's surface.
    /// Regular grids are cell-centred so samples stay half a spacing inside
    /// every boundary.
    pub fn sample_surface(&self, density: f64) -> Vec<SurfaceSample> {
        let spacing = 1.0 / density.sqrt();
        let mut out = Vec::new();
        match *self {
            Shape::Box { size } => {
                let h = Vector3::from(size) * 0.5;
                for axis in 0..3 {
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    for sign in [-1.0, 1.0] {
                        let mut n = Vector3::zeros();
                        n[axis] = sign;
                        grid(2.0 * h[u], 2.0 * h[v], spacing, |a, b| {
                            let mut p = Vector3::zeros();
                            p[axis] = sign * h[axis];
                            p[u] = a - h[u];
                            p[v] = b - h[v];
                            out.push(SurfaceSample { point: p, normal: n });
                        });
                    }
                }
            }
            Shape::Sphere { radius } => {
                let n = ((4.0 * PI * radius * radius * density).round() as usize).max(1);
                for n_dir in fibonacci_sphere(n) {
                    out.push(SurfaceSample {
                        point: n_dir * radius,
                        normal: n_dir,
                    });
                }
            }
            Shape::Cylinder { radius, height } => {
                let h = 0.5 * height;
                let circumference = 2.0 * PI * radius;
                grid(circumference, height, spacing, |a, b| {
                    let phi = a / radius;
                    let n = Vector3::new(phi.cos(), 0.0, phi.sin());
                    out.push(SurfaceSample {
                        point: Vector3::new(radius * n.x, b - h, radius * n.z),
                        normal: n,
                    });
                });
                for (y, ny) in [(-h, -1.0), (h, 1.0)] {
                    for (x, z) in sunflower_disk(radius, density) {
                        out.push(SurfaceSample {
                            point: Vector3::new(x, y, z),
                            normal: Vector3::new(0.0, ny, 0.0),
                        });
                    }
                }
            }
        }
        out
    }
}

/// Cell-centred grid over [0, w] × [0, h].
pub(crate) fn grid(w: f64, h: f64, spacing: f64, mut f: impl FnMut(f64, f64)) {
    let nu = ((w / spacing).round() as usize).max(1);
    let nv = ((h / spacing).round() as usize).max(1);
    let (du, dv) = (w / nu as f64, h / nv as f64);
    for i in 0..nu {
        for j in 0..nv {
            f((i as f64 + 0.5) * du, (j as f64 + 0.5) * dv);
        }
    }
}

pub(crate) fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), y, r * phi.sin())
        })
        .collect()
}

fn sunflower_disk(radius: f64, density: f64) -> Vec<(f64, f64)> {
    let n = ((PI * radius * radius * density).round() as usize).max(1);
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let r = radius * ((i as f64 + 0.5) / n as f64).sqrt();
            let phi = golden * i as f64;
            (r * phi.cos(), r * phi.sin())
        })
        .collect()
}

/// Rotation about +y by `yaw` radians.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_hits_match_geometry() {
        let o = Vector3::new(0.0, 0.0, -5.0);
        let d = Vector3::z();
        let b = Shape::Box { size: [2.0, 2.0, 2.0] };
        assert!((b.intersect(&o, &d).unwrap() - 4.0).abs() < 1e-12);
        let s = Shape::Sphere { radius: 1.0 };
        assert!((s.intersect(&o, &d).unwrap() - 4.0).abs() < 1e-12);
        let c = Shape::Cylinder { radius: 1.0, height: 2.0 };
        assert!((c.intersect(&o, &d).unwrap() - 4.0).abs() < 1e-12);
        // straight down onto the cap
        let top = c.intersect(&Vector3::new(0.2, 5.0, 0.0), &-Vector3::y()).unwrap();
        assert!((top - 4.0).abs() < 1e-12);
        assert!(s.intersect(&Vector3::new(0.0, 2.0, -5.0), &d).is_none());
        // from inside, the exit point is reported
        assert!((b.intersect(&Vector3::zeros(), &d).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn samples_lie_on_surface() {
        for shape in [
            Shape::Box { size: [0.6, 0.5, 0.45] },
            Shape::Sphere { radius: 0.3 },
            Shape::Cylinder { radius: 0.22, height: 0.55 },
        ] {
            let samples = shape.sample_surface(700.0);
            assert!(!samples.is_empty());
            for s in &samples {
                assert!((s.normal.norm() - 1.0).abs() < 1e-12);
                // a tiny step outward leaves the solid, inward stays inside
                assert!(!shape.contains(&(s.point + s.normal * 1e-6)));
                assert!(shape.contains(&(s.point - s.normal * 1e-6)));
            }
        }
    }
}
