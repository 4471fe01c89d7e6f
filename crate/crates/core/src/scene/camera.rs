use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera with a world-to-camera rigid pose.
///
/// Camera space follows the usual vision convention: +x right, +y down, +z
/// forward. Pixel (row, col) has its centre at (col + 0.5, row + 0.5).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraFrame {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub frame_index: u32,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    frame_index: u32,
    /// Row-major world-to-camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<CameraRecord> for CameraFrame {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        CameraFrame::new(
            rot,
            Vector3::from(r.translation),
            [r.fx, r.fy, r.cx, r.cy],
            r.width,
            r.height,
            r.frame_index,
        )
    }
}

impl From<CameraFrame> for CameraRecord {
    fn from(c: CameraFrame) -> Self {
        CameraRecord {
            frame_index: c.frame_index,
            rotation: [0, 1, 2].map(|i| [0, 1, 2].map(|j| c.rotation[(i, j)])),
            translation: [c.translation.x, c.translation.y, c.translation.z],
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraFrame {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        intrinsics: [f64; 4],
        width: u32,
        height: u32,
        frame_index: u32,
    ) -> Result<Self> {
        let [fx, fy, cx, cy] = intrinsics;
        if width == 0 || height == 0 {
            return Err(Error::Argument("camera width and height must be positive".into()));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Argument("camera focal lengths must be positive".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!(
                "camera {frame_index}: rotation is not proper orthonormal"
            )));
        }
        Ok(Self {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            frame_index,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y_deg: f64,
        width: u32,
        height: u32,
        frame_index: u32,
    ) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| {
            Error::Argument("look_at: eye and target coincide".into())
        })?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Argument("look_at: up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self::new(
            rotation,
            translation,
            [f, f, 0.5 * width as f64, 0.5 * height as f64],
            width,
            height,
            frame_index,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Pixel coordinates (x, y) and camera depth; None behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 1e-9 {
            return None;
        }
        Some((
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
            c.z,
        ))
    }

    /// Camera-space direction through a pixel centre with unit depth (z = 1).
    pub fn pixel_direction_camera(&self, row: usize, col: usize) -> Vector3<f64> {
        let x = (col as f64 + 0.5 - self.cx) / self.fx;
        let y = (row as f64 + 0.5 - self.cy) / self.fy;
        Vector3::new(x, y, 1.0)
    }

    /// World point at camera depth `depth` along the ray through a pixel centre.
    pub fn unproject(&self, row: usize, col: usize, depth: f64) -> Vector3<f64> {
        self.camera_to_world(&(self.pixel_direction_camera(row, col) * depth))
    }

    /// Unit world-space ray direction through a pixel centre.
    pub fn pixel_ray(&self, row: usize, col: usize) -> Vector3<f64> {
        (self.rotation.transpose() * self.pixel_direction_camera(row, col)).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Ordered camera path through the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRecord", into = "TrajectoryRecord")]
pub struct Trajectory {
    frames: Vec<CameraFrame>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    frames: Vec<CameraFrame>,
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = Error;
    fn try_from(r: TrajectoryRecord) -> Result<Self> {
        Trajectory::new(r.frames)
    }
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        TrajectoryRecord { frames: t.frames }
    }
}

impl Trajectory {
    pub fn new(frames: Vec<CameraFrame>) -> Result<Self> {
        for pair in frames.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(Error::Argument(format!(
                    "trajectory frame indices must increase strictly ({} then {})",
                    pair[0].frame_index, pair[1].frame_index
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[CameraFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, frame_index: u32) -> Option<&CameraFrame> {
        self.frames
            .binary_search_by_key(&frame_index, |f| f.frame_index)
            .ok()
            .map(|i| &self.frames[i])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraFrame {
        CameraFrame::look_at(
            Vector3::new(0.0, 1.0, -3.0),
            Vector3::zeros(),
            Vector3::y(),
            60.0,
            64,
            48,
            0,
        )
        .unwrap()
    }

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let c = cam();
        let (x, y, z) = c.project(&Vector3::zeros()).unwrap();
        assert!((x - 32.0).abs() < 1e-9 && (y - 24.0).abs() < 1e-9);
        assert!((z - 10f64.sqrt()).abs() < 1e-9);
        // world up maps to image up (negative y)
        let (_, y_up, _) = c.project(&Vector3::new(0.0, 0.1, 0.0)).unwrap();
        assert!(y_up < 24.0);
    }

    #[test]
    fn unproject_inverts_project() {
        let c = cam();
        let p = c.unproject(10, 20, 2.5);
        let (x, y, z) = c.project(&p).unwrap();
        assert!((x - 20.5).abs() < 1e-9 && (y - 10.5).abs() < 1e-9 && (z - 2.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_intrinsics_and_rotation() {
        let r = Matrix3::identity();
        assert!(CameraFrame::new(r, Vector3::zeros(), [0.0, 1.0, 0.0, 0.0], 4, 4, 0).is_err());
        assert!(CameraFrame::new(r, Vector3::zeros(), [1.0, 1.0, 0.0, 0.0], 0, 4, 0).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraFrame::new(reflect, Vector3::zeros(), [1.0, 1.0, 0.0, 0.0], 4, 4, 0).is_err());
    }

    #[test]
    fn trajectory_requires_increasing_indices() {
        let a = cam();
        let mut b = cam();
        b.frame_index = 0;
        assert!(Trajectory::new(vec![a.clone(), b]).is_err());
        let mut c = cam();
        c.frame_index = 3;
        let t = Trajectory::new(vec![a, c]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Trajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert!(back.get(3).is_some() && back.get(1).is_none());
    }
}
