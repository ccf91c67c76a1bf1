use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

pub type Vec3 = Vector3<f64>;

pub fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Pinhole intrinsics in pixels. Pixel `(u, v)` covers
/// `[u, u+1) × [v, v+1)`; its center is at `(u + 0.5, v + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Same field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let (sx, sy) = (width as f64 / self.width as f64, height as f64 / self.height as f64);
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// Camera-to-world rigid transform. Camera axes: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Row-major rotation; columns are the camera axes in world coordinates.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_parts(r: &Matrix3<f64>, t: &Vec3) -> Self {
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [t.x, t.y, t.z],
        }
    }

    /// Camera at `eye` looking at `target` with world `up` (y-up worlds use
    /// `[0, 1, 0]`).
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Self {
        let f = (v3(target) - v3(eye)).normalize();
        let right = f.cross(&v3(up)).normalize();
        let down = f.cross(&right);
        let r = Matrix3::from_columns(&[right, down, f]);
        Self::from_parts(&r, &v3(eye))
    }

    pub fn rot(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn trans(&self) -> Vec3 {
        v3(self.translation)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = self.rot();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 || r.determinant() < 0.0 {
            return Err(GeometryError::Contract(format!(
                "rotation is not orthonormal with det +1 (|RᵀR − I| = {err:e})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Camera-space direction with unit z through continuous image position
    /// `(x, y)`.
    pub fn cam_dir(&self, x: f64, y: f64) -> Vec3 {
        let k = &self.intrinsics;
        Vec3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0)
    }

    /// World-space ray through the center of pixel `(u, v)`. The direction is
    /// scaled so that the ray parameter equals z-depth.
    pub fn pixel_ray(&self, u: usize, v: usize) -> (Vec3, Vec3) {
        self.ray_at(u as f64 + 0.5, v as f64 + 0.5)
    }

    pub fn ray_at(&self, x: f64, y: f64) -> (Vec3, Vec3) {
        (self.pose.trans(), self.pose.rot() * self.cam_dir(x, y))
    }

    pub fn world_to_cam(&self, p: &Vec3) -> Vec3 {
        self.pose.rot().transpose() * (p - self.pose.trans())
    }

    pub fn cam_to_world(&self, p: &Vec3) -> Vec3 {
        self.pose.rot() * p + self.pose.trans()
    }

    /// Continuous image position and z-depth of a world point, or `None`
    /// behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_cam(p);
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }

    /// World point at z-depth `depth` through pixel `(u, v)`.
    pub fn unproject(&self, u: usize, v: usize, depth: f64) -> Vec3 {
        self.cam_to_world(&(self.cam_dir(u as f64 + 0.5, v as f64 + 0.5) * depth))
    }
}
