use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Rigid transform taking world points into a camera frame:
/// `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", from = "PoseRepr")]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Wire form shared by every JSON document: unit quaternion `[w, x, y, z]`
/// with `w >= 0` plus translation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            q: p.quaternion(),
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        Pose::from_quaternion(r.q, Vector3::from(r.t))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Rotation from an axis-angle vector (exponential map).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: *Rotation3::new(axis_angle).matrix(),
            translation,
        }
    }

    /// Builds a pose from a `[w, x, y, z]` quaternion, normalizing it first.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Pose {
            rotation: *uq.to_rotation_matrix().matrix(),
            translation,
        }
    }

    /// Canonical `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        if w < 0.0 {
            [-w, -x, -y, -z]
        } else {
            [w, x, y, z]
        }
    }

    /// Camera looking from `eye` towards `target`; `up` is the world vertical.
    /// Camera axes follow the x-right, y-down, z-forward convention.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Pose {
            rotation,
            translation: -(rotation * eye),
        }
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Left-multiplicative update: `R <- exp(omega) R`, `t <- t + delta_t`.
    pub fn perturbed(&self, omega: &Vector3<f64>, delta_t: &Vector3<f64>) -> Pose {
        let dr = *Rotation3::new(*omega).matrix();
        Pose {
            rotation: dr * self.rotation,
            translation: self.translation + delta_t,
        }
    }

    /// Geodesic angle between the two rotations, radians in `[0, pi]`.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    /// Distance between camera centers.
    pub fn center_error(&self, other: &Pose) -> f64 {
        (self.center() - other.center()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Rotation angle of a rotation matrix, robust near 0 and pi.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * skew.norm();
    sin.atan2(cos)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
