use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarity placement `x -> scale * R x + translation`, with R stored as
/// its first two columns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementPose {
    pub translation: [f64; 3],
    pub r6: [f64; 6],
    pub scale: f64,
}

/// Gram–Schmidt on the two stored columns; the third is their cross product.
pub fn r6_to_rotation(r6: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a = Vector3::new(r6[0], r6[1], r6[2]);
    let b = Vector3::new(r6[3], r6[4], r6[5]);
    let a = a
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Geometry("rotation: first column is zero".into()))?;
    let b = (b - a * a.dot(&b))
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Geometry("rotation: columns are parallel".into()))?;
    Ok(Matrix3::from_columns(&[a, b, a.cross(&b)]))
}

impl PlacementPose {
    pub fn new(rotation: &Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        let c = rotation.column(0);
        let d = rotation.column(1);
        Self {
            translation: translation.into(),
            r6: [c[0], c[1], c[2], d[0], d[1], d[2]],
            scale,
        }
    }

    pub fn identity() -> Self {
        Self::new(&Matrix3::identity(), Vector3::zeros(), 1.0)
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        r6_to_rotation(&self.r6)
    }

    pub fn quaternion(&self) -> Result<UnitQuaternion<f64>> {
        Ok(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.rotation()?,
        )))
    }

    pub fn t(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// The same pose with `r6` replaced by the columns of its rotation.
    pub fn orthonormalized(&self) -> Result<Self> {
        Ok(Self::new(&self.rotation()?, self.t(), self.scale))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Argument(format!("pose scale {} is not positive", self.scale)));
        }
        if self.translation.iter().chain(&self.r6).any(|v| !v.is_finite()) {
            return Err(Error::Argument("pose has non-finite entries".into()));
        }
        self.rotation().map(|_| ())
    }

    /// Rigid part as a row-major 4×4 matrix; the scale is kept separately.
    pub fn matrix(&self) -> Result<[[f64; 4]; 4]> {
        let r = self.rotation()?;
        let t = self.t();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[(i, j)];
            }
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Ok(m)
    }

    pub fn from_matrix(m: &[[f64; 4]; 4], scale: f64) -> Result<Self> {
        let mm = Matrix4::from_fn(|i, j| m[i][j]);
        let r: Matrix3<f64> = mm.fixed_view::<3, 3>(0, 0).into();
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Format("pose matrix: last row must be 0 0 0 1".into()));
        }
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Format("pose matrix: upper block is not a rotation".into()));
        }
        let pose = Self::new(&r, Vector3::new(m[0][3], m[1][3], m[2][3]), scale);
        pose.validate()?;
        Ok(pose)
    }

    pub fn apply(&self, rotation: &Matrix3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
        rotation * p * self.scale + self.t()
    }

    pub fn transform_points(&self, points: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        let r = self.rotation()?;
        Ok(points.iter().map(|p| self.apply(&r, p)).collect())
    }
}

/// Angle in degrees of the relative rotation between two rotation matrices.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) * 0.5;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}
