use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Pose};

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics without lens distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Pixel coordinates of a camera-frame point, ignoring image bounds.
    /// `None` when the point is not in front of the camera.
    #[inline]
    pub fn project_unbounded(&self, xc: &Vector3<f64>) -> Option<Vector2<f64>> {
        if xc.z <= MIN_DEPTH {
            return None;
        }
        Some(Vector2::new(
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        ))
    }

    #[inline]
    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }

    /// Projection of a camera-frame point that must also land inside the image.
    #[inline]
    pub fn project_camera(&self, xc: &Vector3<f64>) -> Option<Vector2<f64>> {
        self.project_unbounded(xc).filter(|uv| self.contains(uv))
    }

    /// Normalized image-plane coordinates of a pixel.
    #[inline]
    pub fn normalize(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy)
    }

    /// Camera-frame point at `depth` along the ray through `uv`.
    pub fn unproject(&self, uv: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let n = self.normalize(uv);
        Vector3::new(n.x * depth, n.y * depth, depth)
    }
}

/// A 2D pixel observation paired with its 3D world point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub point2d: Vector2<f64>,
    pub point3d: Vector3<f64>,
    pub weight: f64,
}

impl Correspondence2D3D {
    pub fn new(point2d: Vector2<f64>, point3d: Vector3<f64>) -> Self {
        Correspondence2D3D {
            point2d,
            point3d,
            weight: 1.0,
        }
    }
}

/// Pixel coordinates of world point `x`, or `None` if it is behind the camera
/// or outside `[0, width) x [0, height)`.
pub fn project(pose: &Pose, k: &CameraIntrinsics, x: &Vector3<f64>) -> Option<Vector2<f64>> {
    k.project_camera(&pose.transform(x))
}

/// Reprojection error in pixels; infinite when the point is not in front of the camera.
pub fn reprojection_error(pose: &Pose, k: &CameraIntrinsics, c: &Correspondence2D3D) -> f64 {
    match k.project_unbounded(&pose.transform(&c.point3d)) {
        Some(uv) => (uv - c.point2d).norm(),
        None => f64::INFINITY,
    }
}
