//! Pinhole cameras, rigid transforms, and world/camera/pixel conversions.
//!
//! Extrinsics follow the world-to-camera convention: `p_cam = R * p_world + t`.
//! All math here is f64; codec round-trip tolerances depend on it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("depth must be positive")]
    NonPositiveDepth,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

pub const MIN_CAMERA_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        assert!(n > 0.0, "cannot normalize a zero vector");
        self * (1.0 / n)
    }

    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, c: f64) -> Vec3 {
        Vec3::new(self.x * c, self.y * c, self.z * c)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Self {
        Self { m: [r0, r1, r2] }
    }

    /// Rotation about an arbitrary axis (Rodrigues).
    pub fn rotation(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Mat3::from_rows(
            [
                t * a.x * a.x + c,
                t * a.x * a.y - s * a.z,
                t * a.x * a.z + s * a.y,
            ],
            [
                t * a.x * a.y + s * a.z,
                t * a.y * a.y + c,
                t * a.y * a.z - s * a.x,
            ],
            [
                t * a.x * a.z - s * a.y,
                t * a.y * a.z + s * a.x,
                t * a.z * a.z + c,
            ],
        )
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Mat3 { m: r }
    }

    pub fn transpose(&self) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.m[j][i];
            }
        }
        Mat3 { m: r }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// max-norm of R^T R - I.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.transpose().mul_mat(self);
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.m[i][j] - target).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Row-wise `R p + t` over a point list.
    pub fn apply(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|&p| self.apply_point(p)).collect()
    }

    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.mul_mat(&inner.rotation),
            translation: self.rotation.mul_vec(inner.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation, meters.
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidCamera("cx outside image".into()));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidCamera("cy outside image".into()));
        }
        if self.rotation.orthonormality_defect() >= 1e-9 {
            return Err(GeometryError::InvalidCamera("rotation not orthonormal".into()));
        }
        if (self.rotation.det() - 1.0).abs() >= 1e-9 {
            return Err(GeometryError::InvalidCamera("rotation determinant != +1".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p_world: Vec3) -> Vec3 {
        self.rotation.mul_vec(p_world) + self.translation
    }

    pub fn camera_to_world(&self, p_cam: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(p_cam - self.translation)
    }

    /// A camera whose world frame has been re-based by `tf`: looking at
    /// `tf(p)` through the result equals looking at `p` through `self`.
    pub fn rebased(&self, tf: &RigidTransform) -> CameraModel {
        let inv = tf.inverse();
        CameraModel {
            rotation: self.rotation.mul_mat(&inv.rotation),
            translation: self.rotation.mul_vec(inv.translation) + self.translation,
            ..self.clone()
        }
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

impl CameraRig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.cameras.is_empty() {
            return Err(GeometryError::InvalidCamera("rig needs at least one camera".into()));
        }
        let (w, h) = (self.cameras[0].width, self.cameras[0].height);
        for cam in &self.cameras {
            cam.validate()?;
            if cam.width != w || cam.height != h {
                return Err(GeometryError::InvalidCamera("rig cameras must share resolution".into()));
            }
        }
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn width(&self) -> u32 {
        self.cameras[0].width
    }

    pub fn height(&self) -> u32 {
        self.cameras[0].height
    }
}

/// Pinhole projection of a world point: pixel coordinates plus camera-space depth.
pub fn project(p_world: Vec3, cam: &CameraModel) -> Result<(f64, f64, f64), GeometryError> {
    let pc = cam.world_to_camera(p_world);
    if pc.z <= MIN_CAMERA_DEPTH {
        return Err(GeometryError::BehindCamera);
    }
    let u = cam.fx * pc.x / pc.z + cam.cx;
    let v = cam.fy * pc.y / pc.z + cam.cy;
    Ok((u, v, pc.z))
}

/// Exact inverse of [`project`] for the same camera.
pub fn unproject(u: f64, v: f64, depth: f64, cam: &CameraModel) -> Result<Vec3, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth);
    }
    let pc = Vec3::new((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
    Ok(cam.camera_to_world(pc))
}

/// Camera-space ray decomposition of a pixel: `world(depth) = origin + dir * depth`.
/// Used where depth stays a free (differentiable) parameter.
pub fn unprojection_ray(u: f64, v: f64, cam: &CameraModel) -> (Vec3, Vec3) {
    let rt = cam.rotation.transpose();
    let origin = rt.mul_vec(-cam.translation);
    let dir = rt.mul_vec(Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0));
    (origin, dir)
}
