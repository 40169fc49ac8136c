//! Small rigid-body helpers shared by the camera, the synthetic environment
//! and the rasterizer. Quaternions are stored as `[w, x, y, z]`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// Returns `q / |q|`, or `None` for a (near) zero or non-finite vector.
pub fn quat_normalize(q: [f64; 4]) -> Option<[f64; 4]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !n.is_finite() || n < 1e-12 {
        return None;
    }
    Some([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

pub fn quat_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion of a rotation matrix, with non-negative `w`.
pub fn quat_from_matrix(m: &Mat3) -> [f64; 4] {
    let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    let q = uq.quaternion();
    let out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        [-out[0], -out[1], -out[2], -out[3]]
    } else {
        out
    }
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// ZYX Euler angles (degrees, `[about x, about y, about z]`) to a rotation:
/// `R = Rz(z) * Ry(y) * Rx(x)`.
pub fn euler_zyx_deg_to_matrix(angles: [f64; 3]) -> Mat3 {
    let [rx, ry, rz] = angles.map(f64::to_radians);
    *Rotation3::from_euler_angles(rx, ry, rz).matrix()
}

/// Inverse of [`euler_zyx_deg_to_matrix`], angles wrapped into `[0, 360)`.
pub fn matrix_to_euler_zyx_deg(m: &Mat3) -> [f64; 3] {
    let (rx, ry, rz) = Rotation3::from_matrix_unchecked(*m).euler_angles();
    [rx, ry, rz].map(|a| a.to_degrees().rem_euclid(360.0))
}

/// Largest deviation of `m * m^T` from the identity.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    (m * m.transpose() - Mat3::identity()).abs().max()
}

/// A rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self::new(Mat3::identity(), Vec3::from(t))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quaternion_matrix_round_trip() {
        let q = quat_normalize([0.3, -0.2, 0.8, 0.1]).unwrap();
        let m = quat_to_matrix(q);
        assert!(orthonormality_error(&m) < 1e-12);
        let back = quat_from_matrix(&m);
        for (a, b) in q.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zyx_composes_z_last() {
        let m = euler_zyx_deg_to_matrix([0.0, 0.0, 90.0]);
        let p = m * Vec3::new(1.0, 0.0, 0.0);
        assert!((p - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let angles = [10.0, 20.0, 300.0];
        let back = matrix_to_euler_zyx_deg(&euler_zyx_deg_to_matrix(angles));
        for (a, b) in angles.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9, "{angles:?} vs {back:?}");
        }
    }

    #[test]
    fn quat_mul_matches_matrix_product() {
        let a = quat_normalize([0.9, 0.1, -0.3, 0.2]).unwrap();
        let b = quat_normalize([0.2, 0.7, 0.1, -0.4]).unwrap();
        let lhs = quat_to_matrix(quat_mul(a, b));
        let rhs = quat_to_matrix(a) * quat_to_matrix(b);
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let p = Pose::new(euler_zyx_deg_to_matrix([5.0, 40.0, 120.0]), Vec3::new(0.1, -2.0, 3.0));
        let id = p.compose(&p.inverse());
        assert!((id.rotation - Mat3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }
}
