//! Rigid transforms and pinhole intrinsics.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-12 {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    Mat3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * k * k
}

pub fn log_so3(r: &Mat3) -> Vec3 {
    let rot = Rotation3::from_matrix_unchecked(*r);
    rot.scaled_axis()
}

/// Right Jacobian of SO(3): `Exp(w + dw) ≈ Exp(w) Exp(J_r(w) dw)`.
pub fn right_jacobian_so3(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-10 {
        return Mat3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let theta = theta2.sqrt();
    Mat3::identity() - ((1.0 - theta.cos()) / theta2) * k
        + ((theta - theta.sin()) / (theta2 * theta)) * k * k
}

/// Jacobian of `Exp(w) q` with respect to `w`.
pub fn rotate_jacobian(w: &Vec3, q: &Vec3) -> Mat3 {
    -exp_so3(w) * skew(q) * right_jacobian_so3(w)
}

/// Rigid transform mapping points from a source frame into a target frame:
/// `p_target = rotation * p_source + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        PoseSE3 {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    /// Axis-angle rotation followed by translation.
    pub fn from_axis_angle(w: Vec3, t: Vec3) -> Self {
        Self::new(exp_so3(&w), t)
    }

    /// The 6-vector increment `[w, v]` as a transform `[Exp(w) | v]`.
    pub fn from_increment(delta: &[f64; 6]) -> Self {
        Self::from_axis_angle(
            Vec3::new(delta[0], delta[1], delta[2]),
            Vec3::new(delta[3], delta[4], delta[5]),
        )
    }

    /// `[Exp(w) | v] * self`.
    pub fn left_increment(&self, delta: &[f64; 6]) -> Self {
        Self::from_increment(delta).compose(self)
    }

    pub fn from_quaternion(t: Vec3, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Self::new(*q.to_rotation_matrix().matrix(), t)
    }

    /// (qx, qy, qz, qw)
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        [q.i, q.j, q.k, q.w]
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4x4 entries.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Self {
        Self::from_matrix(&Matrix4::from_row_slice(v))
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle of `self⁻¹ * other`, in radians.
    pub fn rotation_angle_to(&self, other: &PoseSE3) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_distance_to(&self, other: &PoseSE3) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Mat3::identity()).abs().max();
        orth <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> PoseSE3 {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let mut d = Mat3::identity();
        d[(2, 2)] = (u * vt).determinant().signum();
        PoseSE3::new(u * d * vt, self.translation)
    }
}

/// Pinhole camera parameters in pixels.
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
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
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

    /// Centred principal point and the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx > 0.0 && self.fy > 0.0 && self.width > 0 && self.height > 0 {
            Ok(())
        } else {
            Err(SlamError::contract(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Camera-frame point at unit depth through pixel centre `(row, col)`.
    pub fn unproject_unit(&self, row: f64, col: f64) -> Vec3 {
        Vec3::new((col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0)
    }

    pub fn back_project(&self, row: f64, col: f64, depth: f64) -> Vec3 {
        self.unproject_unit(row, col) * depth
    }

    /// `(row, col)` of a camera-frame point with positive depth.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fy * p.y / p.z + self.cy,
            self.fx * p.x / p.z + self.cx,
        ))
    }

    /// Whether continuous pixel coordinates round to a pixel in the image.
    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (r, c) = (row.round(), col.round());
        r >= 0.0 && c >= 0.0 && r < self.height as f64 && c < self.width as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exp_log_round_trip() {
        let w = Vec3::new(0.3, -0.2, 0.9);
        assert_relative_eq!(log_so3(&exp_so3(&w)), w, epsilon = 1e-12);
    }

    #[test]
    fn rotate_jacobian_matches_finite_differences() {
        let w = Vec3::new(0.4, -0.7, 0.25);
        let q = Vec3::new(1.0, 2.0, -0.5);
        let j = rotate_jacobian(&w, &q);
        let h = 1e-6;
        for k in 0..3 {
            let mut wp = w;
            let mut wm = w;
            wp[k] += h;
            wm[k] -= h;
            let fd = (exp_so3(&wp) * q - exp_so3(&wm) * q) / (2.0 * h);
            assert_relative_eq!(j.column(k).into_owned(), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn compose_and_inverse() {
        let a = PoseSE3::from_axis_angle(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, -2.0, 0.5));
        let id = a.compose(&a.inverse());
        assert_relative_eq!(id.rotation, Mat3::identity(), epsilon = 1e-12);
        assert_relative_eq!(id.translation, Vec3::zeros(), epsilon = 1e-12);
        let q = a.quaternion();
        let b = PoseSE3::from_quaternion(a.translation, q[0], q[1], q[2], q[3]);
        assert_relative_eq!(a.rotation, b.rotation, epsilon = 1e-12);
    }

    #[test]
    fn projection_round_trip() {
        let k = Intrinsics::new(50.0, 52.0, 39.5, 29.5, 80, 60).unwrap();
        let p = k.back_project(10.0, 70.0, 2.5);
        let (r, c) = k.project(&p).unwrap();
        assert_relative_eq!(r, 10.0, epsilon = 1e-12);
        assert_relative_eq!(c, 70.0, epsilon = 1e-12);
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
    }
}
