//! Gaussian scenes, entity labels and cameras.

mod camera;
pub mod ply;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub use camera::{CameraFrame, Trajectory};
pub use ply::{load_scene, save_scene};

use crate::error::{Error, Result};

/// Degree-0 spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Entity id 0 is the background; objects are numbered from 1.
pub type Label = u32;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

/// One splat, stored in the raw parametrisation of the PLY format: log-scales,
/// an opacity logit and SH coefficients. Activated values come from accessors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub center: [f32; 3],
    pub log_scale: [f32; 3],
    /// (w, x, y, z)
    pub rotation: [f32; 4],
    pub opacity_logit: f32,
    pub color_dc: [f32; 3],
    pub sh_rest: Vec<f32>,
}

impl GaussianPrimitive {
    /// Build from activated parameters. Opacity is clamped to (0, 1) so the
    /// stored logit stays finite.
    pub fn new(
        center: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        opacity: f64,
        rgb: [f64; 3],
    ) -> Self {
        let q = rotation.quaternion();
        Self {
            center: [center.x as f32, center.y as f32, center.z as f32],
            log_scale: [
                scale.x.ln() as f32,
                scale.y.ln() as f32,
                scale.z.ln() as f32,
            ],
            rotation: [q.w as f32, q.i as f32, q.j as f32, q.k as f32],
            opacity_logit: logit(opacity) as f32,
            color_dc: rgb.map(|c| ((c - 0.5) / SH_C0) as f32),
            sh_rest: Vec::new(),
        }
    }

    pub fn isotropic(center: Vector3<f64>, sigma: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        Self::new(
            center,
            Vector3::repeat(sigma),
            UnitQuaternion::identity(),
            opacity,
            rgb,
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            self.center[0] as f64,
            self.center[1] as f64,
            self.center[2] as f64,
        )
    }

    pub fn scale(&self) -> Vector3<f64> {
        Vector3::new(
            (self.log_scale[0] as f64).exp(),
            (self.log_scale[1] as f64).exp(),
            (self.log_scale[2] as f64).exp(),
        )
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation.map(|v| v as f64);
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit as f64)
    }

    pub fn set_opacity(&mut self, opacity: f64) {
        self.opacity_logit = logit(opacity) as f32;
    }

    /// Base colour from the degree-0 SH band, clamped at zero.
    pub fn color(&self) -> [f64; 3] {
        self.color_dc.map(|c| (0.5 + SH_C0 * c as f64).max(0.0))
    }

    pub fn set_color(&mut self, rgb: [f64; 3]) {
        self.color_dc = rgb.map(|c| ((c - 0.5) / SH_C0) as f32);
    }

    /// World-space covariance R S S^T R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation().to_rotation_matrix().into_inner();
        let s = self.scale();
        let rs = r * Matrix3::from_diagonal(&s);
        rs * rs.transpose()
    }

    /// Apply x -> scale * R x + t to the splat.
    pub fn transformed(
        &self,
        rotation: &UnitQuaternion<f64>,
        translation: &Vector3<f64>,
        scale: f64,
    ) -> Self {
        let c = rotation * self.center() * scale + translation;
        let q = (rotation * self.rotation()).into_inner();
        let ln_s = scale.ln();
        Self {
            center: [c.x as f32, c.y as f32, c.z as f32],
            log_scale: self.log_scale.map(|v| (v as f64 + ln_s) as f32),
            rotation: [q.w as f32, q.i as f32, q.j as f32, q.k as f32],
            opacity_logit: self.opacity_logit,
            color_dc: self.color_dc,
            sh_rest: self.sh_rest.clone(),
        }
    }

    fn check(&self, index: usize) -> Result<()> {
        let fields: [(&str, &[f32]); 5] = [
            ("center", &self.center),
            ("log_scale", &self.log_scale),
            ("rotation", &self.rotation),
            ("opacity", std::slice::from_ref(&self.opacity_logit)),
            ("color_dc", &self.color_dc),
        ];
        for (name, values) in fields {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite {name} in primitive {index}"
                )));
            }
        }
        if self.sh_rest.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite sh_rest in primitive {index}"
            )));
        }
        if self.scale().iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Data(format!(
                "scale does not exponentiate to a finite positive value in primitive {index}"
            )));
        }
        Ok(())
    }

    /// Renormalise the quaternion only when it is off by more than 1e-6, so
    /// already-normalised values survive a save/load cycle bit for bit.
    fn normalize_rotation(&mut self, index: usize) -> Result<()> {
        let q = self.rotation.map(|v| v as f64);
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::Data(format!(
                "degenerate rotation quaternion in primitive {index}"
            )));
        }
        if (norm - 1.0).abs() > 1e-6 {
            self.rotation = q.map(|v| (v / norm) as f32);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vector3<f64>) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min[0] > self.max[0]
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn extent(&self) -> Vector3<f64> {
        if self.is_empty() {
            return Vector3::zeros();
        }
        Vector3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }

    /// Box scaled about its centre.
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.center();
        let h = self.extent() * (0.5 * factor);
        Self {
            min: [c.x - h.x, c.y - h.y, c.z - h.z],
            max: [c.x + h.x, c.y + h.y, c.z + h.z],
        }
    }
}

/// An ordered set of primitives with one entity label per primitive.
///
/// Labels realise a disjoint partition by construction: each primitive has
/// exactly one label.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    primitives: Vec<GaussianPrimitive>,
    labels: Vec<Label>,
    bbox: Aabb,
}

impl Default for GaussianScene {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl GaussianScene {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        let labels = vec![0; primitives.len()];
        let bbox = compute_bbox(&primitives);
        Self {
            primitives,
            labels,
            bbox,
        }
    }

    pub fn with_labels(primitives: Vec<GaussianPrimitive>, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != primitives.len() {
            return Err(Error::Argument(format!(
                "{} labels for {} primitives",
                labels.len(),
                primitives.len()
            )));
        }
        let bbox = compute_bbox(&primitives);
        Ok(Self {
            primitives,
            labels,
            bbox,
        })
    }

    /// Validate and normalise raw primitives the way the loader does.
    pub fn from_raw(mut primitives: Vec<GaussianPrimitive>, labels: Vec<Label>) -> Result<Self> {
        for (i, p) in primitives.iter_mut().enumerate() {
            p.check(i)?;
            p.normalize_rotation(i)?;
        }
        Self::with_labels(primitives, labels)
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn set_labels(&mut self, labels: Vec<Label>) -> Result<()> {
        if labels.len() != self.primitives.len() {
            return Err(Error::Argument(format!(
                "{} labels for {} primitives",
                labels.len(),
                self.primitives.len()
            )));
        }
        self.labels = labels;
        Ok(())
    }

    pub fn push(&mut self, primitive: GaussianPrimitive, label: Label) {
        self.bbox.grow(&primitive.center());
        self.primitives.push(primitive);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &GaussianScene) {
        for (p, &l) in other.primitives.iter().zip(&other.labels) {
            self.push(p.clone(), l);
        }
    }

    /// Apply `f` to every primitive and rebuild the cached bounds.
    pub fn map_primitives(&mut self, mut f: impl FnMut(usize, &mut GaussianPrimitive)) {
        for (i, p) in self.primitives.iter_mut().enumerate() {
            f(i, p);
        }
        self.bbox = compute_bbox(&self.primitives);
    }

    pub fn subset(&self, indices: &[usize]) -> GaussianScene {
        let primitives = indices.iter().map(|&i| self.primitives[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        GaussianScene::with_labels(primitives, labels).expect("lengths agree")
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.primitives.iter().map(|p| p.center()).collect()
    }

    /// Sorted distinct nonzero labels.
    pub fn object_ids(&self) -> Vec<Label> {
        let mut ids: Vec<Label> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn transformed(
        &self,
        rotation: &UnitQuaternion<f64>,
        translation: &Vector3<f64>,
        scale: f64,
    ) -> GaussianScene {
        let primitives = self
            .primitives
            .iter()
            .map(|p| p.transformed(rotation, translation, scale))
            .collect();
        GaussianScene::with_labels(primitives, self.labels.clone()).expect("lengths agree")
    }
}

fn compute_bbox(primitives: &[GaussianPrimitive]) -> Aabb {
    let mut b = Aabb::empty();
    for p in primitives {
        b.grow(&p.center());
    }
    b
}

/// Result of splitting a labelled scene into its entities.
#[derive(Clone, Debug)]
pub struct SceneSplit {
    pub background: GaussianScene,
    pub background_indices: Vec<usize>,
    /// (object id, primitive indices into the source scene, subset), ordered by id.
    pub objects: Vec<(Label, Vec<usize>, GaussianScene)>,
}

/// Split into the label-0 background and one subset per object id.
pub fn split_by_labels(scene: &GaussianScene) -> SceneSplit {
    let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in scene.labels().iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let background_indices = groups.remove(&0).unwrap_or_default();
    let background = scene.subset(&background_indices);
    let objects = groups
        .into_iter()
        .map(|(id, idx)| {
            let sub = scene.subset(&idx);
            (id, idx, sub)
        })
        .collect();
    SceneSplit {
        background,
        background_indices,
        objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prim(x: f64) -> GaussianPrimitive {
        GaussianPrimitive::isotropic(Vector3::new(x, 0.0, 0.0), 0.1, 0.5, [0.2, 0.4, 0.6])
    }

    #[test]
    fn activated_accessors() {
        let p = prim(0.0);
        assert!((p.opacity() - 0.5).abs() < 1e-12);
        let c = p.color();
        assert!((c[1] - 0.4).abs() < 1e-6);
        assert!((p.scale().x - 0.1).abs() < 1e-7);
        let cov = p.covariance();
        assert!((cov[(0, 0)] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn split_counts_labels() {
        let scene = GaussianScene::with_labels((0..4).map(|i| prim(i as f64)).collect(), vec![0, 1, 1, 2])
            .unwrap();
        let split = split_by_labels(&scene);
        assert_eq!(split.background.len(), 1);
        let sizes: Vec<usize> = split.objects.iter().map(|o| o.2.len()).collect();
        assert_eq!(sizes, vec![2, 1]);
    }

    #[test]
    fn all_background_yields_no_objects() {
        let scene = GaussianScene::new((0..3).map(|i| prim(i as f64)).collect());
        let split = split_by_labels(&scene);
        assert_eq!(split.background, scene);
        assert!(split.objects.is_empty());
    }

    #[test]
    fn label_length_mismatch_rejected() {
        assert!(GaussianScene::with_labels(vec![prim(0.0)], vec![]).is_err());
    }

    #[test]
    fn nonfinite_rejected_with_index() {
        let mut bad = prim(0.0);
        bad.center[1] = f32::NAN;
        let err = GaussianScene::from_raw(vec![prim(1.0), bad], vec![0, 0]).unwrap_err();
        assert!(err.to_string().contains("primitive 1"), "{err}");
    }

    #[test]
    fn transform_moves_center_and_scale() {
        let p = prim(1.0);
        let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2);
        let t = p.transformed(&q, &Vector3::new(0.0, 1.0, 0.0), 2.0);
        let c = t.center();
        assert!((c - Vector3::new(0.0, 1.0, -2.0)).norm() < 1e-6);
        assert!((t.scale().x - 0.2).abs() < 1e-6);
    }
}
