use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::SceneError;

/// Pinhole intrinsics in pixels. Pixel centres sit at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, SceneError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera centred on a `width x height` image.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(SceneError::InvalidBuffer(format!(
                "intrinsics need finite values and positive focal lengths, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point to pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame ray direction through pixel `(u, v)` with unit z.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-6;

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, SceneError> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    /// Pose of a camera centred at `center` whose world-to-camera rotation is `rotation`.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// Camera with yaw `yaw` (radians, about the world y axis) centred at `center`.
    pub fn look_yaw(center: Vector3<f64>, yaw: f64) -> Self {
        // Camera-to-world rotation is the yaw; invert for world-to-camera.
        let r_cw = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
        Self::from_center(r_cw.inverse().into_inner(), center)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let r = &self.rotation;
        if r.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(SceneError::InvalidBuffer("pose has non-finite entries".into()));
        }
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL || (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(SceneError::InvalidBuffer(format!(
                "rotation is not a proper rotation (orthonormality error {err:.3e}, det {:.6})",
                r.determinant()
            )));
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major rotation entries as stored in manifests.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_row_major(r: [f64; 9], t: [f64; 3]) -> Result<Self, SceneError> {
        Self::new(Matrix3::from_row_slice(&r), Vector3::from(t))
    }
}

/// Serialized pose: `{"R": [9 numbers, row-major], "t": [3 numbers]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        Self {
            r: p.rotation_row_major(),
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRecord> for CameraPose {
    type Error = SceneError;

    fn try_from(p: PoseRecord) -> Result<Self, Self::Error> {
        CameraPose::from_row_major(p.r, p.t)
    }
}

impl Serialize for CameraPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        CameraPose::try_from(rec).map_err(serde::de::Error::custom)
    }
}
