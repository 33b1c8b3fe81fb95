//! Rotation and pose algebra plus the Double Sphere fisheye camera model.
//!
//! Quaternions are Hamilton, scalar-first (`w + xi + yj + zk`), and rotate
//! body-frame vectors into the parent frame: `v_parent = R{q} v_body`.
//! Euler angles are intrinsic Z-Y-X, i.e. `R = R_yaw * R_pitch * R_roll`.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::Mul;

/// Pitch magnitude (degrees) above which Z-Y-X extraction is refused.
pub const GIMBAL_GUARD_DEG: f64 = 89.9;

/// Below this rotation-vector norm the exponential map uses its first-order series.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("pitch of {pitch_deg:.3} deg is inside the gimbal guard")]
    GimbalLock { pitch_deg: f64 },
    #[error("point cannot be projected by the camera model")]
    OutOfImage,
    #[error("pixel ({u:.3}, {v:.3}) is outside the unprojectable region")]
    InvalidPixel { u: f64, v: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// Hamilton product, renormalized.
pub fn quat_mul(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(a.quaternion() * b.quaternion())
}

pub fn quat_conj(q: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    q.conjugate()
}

/// Exponential map from a rotation vector (axis * angle, radians) to a unit quaternion.
pub fn quat_from_rotvec(theta: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = theta.norm();
    if angle < SMALL_ANGLE {
        let half = theta * 0.5;
        return UnitQuaternion::new_normalize(Quaternion::new(1.0, half.x, half.y, half.z));
    }
    let (s, c) = (angle * 0.5).sin_cos();
    let axis = theta * (s / angle);
    UnitQuaternion::new_unchecked(Quaternion::new(c, axis.x, axis.y, axis.z))
}

/// Logarithm map: the rotation vector of `q`, with angle in `[0, pi]`.
pub fn rotvec_from_quat(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    // pick the hemisphere with w >= 0 so the angle is the short way round
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let n = v.norm();
    if n < 1e-12 {
        return v * (2.0 / w);
    }
    let angle = 2.0 * n.atan2(w);
    v * (angle / n)
}

pub fn rotmat_from_quat(q: &UnitQuaternion<f64>) -> Rotation3<f64> {
    q.to_rotation_matrix()
}

pub fn rotmat_from_rotvec(theta: &Vector3<f64>) -> Rotation3<f64> {
    rotmat_from_quat(&quat_from_rotvec(theta))
}

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Geodesic angle (radians, in `[0, pi]`) between two rotations.
pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    rotvec_from_quat(&quat_mul(&a.conjugate(), b)).norm()
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub fn rot_roll(roll: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), roll)
}

pub fn rot_pitch(pitch: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), pitch)
}

pub fn rot_yaw(yaw: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
}

/// Intrinsic Z-Y-X Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerZyx {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerZyx {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn to_rotation(&self) -> Rotation3<f64> {
        rot_yaw(self.yaw) * rot_pitch(self.pitch) * rot_roll(self.roll)
    }

    pub fn to_quat(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.to_rotation())
    }
}

pub fn euler_zyx_from_rotation(r: &Rotation3<f64>) -> Result<EulerZyx, GeomError> {
    let m = r.matrix();
    let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
    if pitch.abs().to_degrees() > GIMBAL_GUARD_DEG {
        return Err(GeomError::GimbalLock { pitch_deg: pitch.to_degrees() });
    }
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    Ok(EulerZyx { roll, pitch, yaw })
}

pub fn euler_zyx_from_quat(q: &UnitQuaternion<f64>) -> Result<EulerZyx, GeomError> {
    euler_zyx_from_rotation(&rotmat_from_quat(q))
}

/// Rigid transform `x_parent = rotation * x_child + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    pub fn from_quat(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(rotmat_from_quat(q), translation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rebuilds a pose from the top 3x4 block, projecting the rotation back onto SO(3).
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(Rotation3::from_matrix(&r), t)
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(self.rotation * rhs.rotation, self.rotation * rhs.translation + self.translation)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        *self * *rhs
    }
}

/// Double Sphere camera intrinsics.
///
/// The image plane follows the usual camera convention (z along the optical
/// axis, x right, y down). `fov_deg` is the full cone angle about the axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub xi: f64,
    pub alpha: f64,
    pub fov_deg: f64,
}

impl Default for DsIntrinsics {
    fn default() -> Self {
        Self { fx: 285.0, fy: 285.0, cx: 320.0, cy: 320.0, xi: -0.18, alpha: 0.59, fov_deg: 185.0 }
    }
}

impl DsIntrinsics {
    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(GeomError::InvalidIntrinsics("alpha must lie in [0, 1]"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 185.0) {
            return Err(GeomError::InvalidIntrinsics("fov_deg must lie in (0, 185]"));
        }
        Ok(())
    }

    /// `z > -w2 * d1` bounds the region where the projection is injective.
    fn projection_bound(&self) -> f64 {
        let (xi, alpha) = (self.xi, self.alpha);
        let w1 = if alpha > 0.5 { (1.0 - alpha) / alpha } else { alpha / (1.0 - alpha) };
        (w1 + xi) / (2.0 * w1 * xi + xi * xi + 1.0).sqrt()
    }

    fn inside_fov(&self, p: &Vector3<f64>) -> bool {
        let half = (self.fov_deg * 0.5).to_radians();
        p.z >= half.cos() * p.norm()
    }
}

pub fn ds_project(p_cam: &Vector3<f64>, k: &DsIntrinsics) -> Result<Vector2<f64>, GeomError> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let r2 = x * x + y * y;
    let d1 = (r2 + z * z).sqrt();
    if d1 == 0.0 || !k.inside_fov(p_cam) || z <= -k.projection_bound() * d1 {
        return Err(GeomError::OutOfImage);
    }
    let xi_d1_z = k.xi * d1 + z;
    let d2 = (r2 + xi_d1_z * xi_d1_z).sqrt();
    let denom = k.alpha * d2 + (1.0 - k.alpha) * xi_d1_z;
    if denom <= 1e-12 * d1 {
        return Err(GeomError::OutOfImage);
    }
    Ok(Vector2::new(k.fx * x / denom + k.cx, k.fy * y / denom + k.cy))
}

/// Unit bearing for a pixel.
pub fn ds_unproject(uv: &Vector2<f64>, k: &DsIntrinsics) -> Result<Vector3<f64>, GeomError> {
    let invalid = GeomError::InvalidPixel { u: uv.x, v: uv.y };
    let (xi, alpha) = (k.xi, k.alpha);
    let mx = (uv.x - k.cx) / k.fx;
    let my = (uv.y - k.cy) / k.fy;
    let r2 = mx * mx + my * my;
    if alpha > 0.5 && r2 > 1.0 / (2.0 * alpha - 1.0) {
        return Err(invalid);
    }
    let mz = (1.0 - alpha * alpha * r2) / (alpha * (1.0 - (2.0 * alpha - 1.0) * r2).sqrt() + 1.0 - alpha);
    let disc = mz * mz + (1.0 - xi * xi) * r2;
    if disc < 0.0 {
        return Err(invalid);
    }
    let scale = (mz * xi + disc.sqrt()) / (mz * mz + r2);
    let ray = Vector3::new(scale * mx, scale * my, scale * mz - xi);
    let n = ray.norm();
    if !n.is_finite() || n == 0.0 {
        return Err(invalid);
    }
    Ok(ray / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        UnitQuaternion::new_normalize(q)
    }

    /// Rodrigues: I + sin(a) K + (1 - cos(a)) K^2 with K the unit-axis skew matrix.
    fn rodrigues(theta: &Vector3<f64>) -> Matrix3<f64> {
        let a = theta.norm();
        if a == 0.0 {
            return Matrix3::identity();
        }
        let u = theta / a;
        let kx = Matrix3::new(0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0);
        Matrix3::identity() + kx * a.sin() + kx * kx * (1.0 - a.cos())
    }

    /// Hand-written Hamilton product on [w, x, y, z] arrays.
    fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    }

    fn wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
        [q.w, q.i, q.j, q.k]
    }

    #[test]
    fn quat_mul_identity_and_inverse() {
        let mut rng = rng();
        let q = random_quat(&mut rng);
        let id = UnitQuaternion::identity();
        assert!(rotation_angle_between(&quat_mul(&id, &q), &q) < 1e-12);
        assert!(quat_mul(&q, &quat_conj(&q)).angle() < 1e-12);
    }

    #[test]
    fn quat_mul_quarter_turns_compose_to_half_turn() {
        let qz = quat_from_rotvec(&Vector3::new(0.0, 0.0, PI / 2.0));
        let prod = quat_mul(&qz, &qz);
        let oracle = rodrigues(&Vector3::new(0.0, 0.0, PI / 2.0)) * rodrigues(&Vector3::new(0.0, 0.0, PI / 2.0));
        assert!((rotmat_from_quat(&prod).matrix() - oracle).norm() < 1e-12);
        assert!((prod.angle() - PI).abs() < 1e-12);
    }

    #[test]
    fn quat_mul_matches_hand_hamilton_product() {
        let mut rng = rng();
        for _ in 0..200 {
            let a = random_quat(&mut rng);
            let b = random_quat(&mut rng);
            let got = wxyz(&quat_mul(&a, &b));
            let want = hamilton(wxyz(&a), wxyz(&b));
            for i in 0..4 {
                assert!((got[i] - want[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conjugate_is_transpose() {
        let mut rng = rng();
        let q = random_quat(&mut rng);
        let r = rotmat_from_quat(&q);
        let rc = rotmat_from_quat(&quat_conj(&q));
        assert!((rc.matrix() - r.matrix().transpose()).norm() < 1e-12);
        assert_eq!(quat_conj(&UnitQuaternion::identity()), UnitQuaternion::identity());
    }

    #[test]
    fn rotvec_exp_edge_cases() {
        assert_eq!(quat_from_rotvec(&Vector3::zeros()), UnitQuaternion::identity());
        let half = quat_from_rotvec(&Vector3::new(0.0, 0.0, PI));
        assert!(half.w.abs() < 1e-15);
        assert!((half.k - 1.0).abs() < 1e-15);
        let tiny = Vector3::new(1e-10, -2e-10, 3e-10);
        assert!((rotvec_from_quat(&quat_from_rotvec(&tiny)) - tiny).norm() < 1e-20);
    }

    #[test]
    fn rotvec_matches_rodrigues_on_many_vectors() {
        let mut rng = rng();
        for _ in 0..10_000 {
            let dir =
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if dir.norm() < 1e-3 {
                continue;
            }
            let theta = dir.normalize() * rng.random_range(0.0..PI);
            let r = rotmat_from_rotvec(&theta);
            assert!((r.matrix() - rodrigues(&theta)).norm() < 1e-12);
            assert!((rotvec_from_quat(&quat_from_rotvec(&theta)) - theta).norm() < 1e-9);
        }
    }

    #[test]
    fn rotmat_agrees_with_quaternion_sandwich() {
        let mut rng = rng();
        for _ in 0..1000 {
            let q = random_quat(&mut rng);
            let v = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let qv = hamilton(hamilton(wxyz(&q), [0.0, v.x, v.y, v.z]), wxyz(&q.conjugate()));
            let rv = rotmat_from_quat(&q) * v;
            assert!((rv - Vector3::new(qv[1], qv[2], qv[3])).norm() < 1e-12);
            let m = rotmat_from_quat(&q).into_inner();
            assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
        let r = rotmat_from_quat(&quat_from_rotvec(&Vector3::new(0.0, 0.0, PI / 2.0)));
        assert!((r * Vector3::x() - Vector3::y()).norm() < 1e-15);
        assert_eq!(rotmat_from_quat(&UnitQuaternion::identity()), Rotation3::identity());
    }

    #[test]
    fn skew_is_cross_product() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(skew(&Vector3::x()) * Vector3::y(), Vector3::z());
        let v = Vector3::new(0.3, -1.2, 2.0);
        let w = Vector3::new(-0.7, 0.1, 0.4);
        assert!((skew(&v) * w - v.cross(&w)).norm() < 1e-15);
        assert_eq!(skew(&v).transpose(), -skew(&v));
    }

    #[test]
    fn euler_extraction() {
        let e = euler_zyx_from_quat(&UnitQuaternion::identity()).unwrap();
        assert_eq!(e, EulerZyx::default());
        let yaw30 = quat_from_rotvec(&Vector3::new(0.0, 0.0, 30f64.to_radians()));
        let e = euler_zyx_from_quat(&yaw30).unwrap();
        assert!(e.roll.abs() < 1e-12 && e.pitch.abs() < 1e-12);
        assert!((e.yaw - 30f64.to_radians()).abs() < 1e-12);

        let locked = EulerZyx::new(0.1, 89.95f64.to_radians(), 0.2).to_quat();
        assert!(matches!(euler_zyx_from_quat(&locked), Err(GeomError::GimbalLock { .. })));
    }

    #[test]
    fn euler_round_trips_through_recomposition() {
        let mut rng = rng();
        for _ in 0..10_000 {
            let e = EulerZyx::new(
                rng.random_range(-PI..PI),
                rng.random_range(-80f64..80.0).to_radians(),
                rng.random_range(-PI..PI),
            );
            let q = e.to_quat();
            let back = euler_zyx_from_quat(&q).unwrap();
            let recomposed = rot_yaw(back.yaw) * rot_pitch(back.pitch) * rot_roll(back.roll);
            assert!((recomposed.matrix() - rotmat_from_quat(&q).matrix()).norm() < 1e-9);
            assert!((back.pitch - e.pitch).abs() < 1e-9);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!(wrap_angle(0.0) == 0.0);
    }

    #[test]
    fn pose_inverse_and_homogeneous() {
        let mut rng = rng();
        let p = Pose::from_quat(&random_quat(&mut rng), Vector3::new(1.0, -2.0, 0.5));
        let id = p * p.inverse();
        assert!((id.to_homogeneous() - Matrix4::identity()).norm() < 1e-12);
        let back = Pose::from_homogeneous(&p.to_homogeneous());
        assert!((back.to_homogeneous() - p.to_homogeneous()).norm() < 1e-12);
    }

    #[test]
    fn projection_of_axis_hits_principal_point() {
        let k = DsIntrinsics::default();
        let uv = ds_project(&Vector3::new(0.0, 0.0, 1.0), &k).unwrap();
        assert!((uv - Vector2::new(k.cx, k.cy)).norm() < 1e-12);
        let back = ds_unproject(&Vector2::new(k.cx, k.cy), &k).unwrap();
        assert!((back - Vector3::z()).norm() < 1e-12);
        assert_eq!(ds_project(&Vector3::new(0.0, 0.1, -1.0), &k), Err(GeomError::OutOfImage));
        assert_eq!(ds_project(&Vector3::zeros(), &k), Err(GeomError::OutOfImage));
    }

    #[test]
    fn projection_round_trip_over_full_cone() {
        let k = DsIntrinsics::default();
        let half = (k.fov_deg / 2.0).to_radians();
        let mut rng = rng();
        for _ in 0..10_000 {
            let polar = rng.random_range(0.0..half);
            let az = rng.random_range(-PI..PI);
            let dir = Vector3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos());
            let p = dir * rng.random_range(0.1..60.0);
            let uv = ds_project(&p, &k).unwrap();
            let ray = ds_unproject(&uv, &k).unwrap();
            assert!((ray.norm() - 1.0).abs() < 1e-12);
            assert!((ray - dir).norm() < 1e-9, "polar {polar}");
            let uv2 = ds_project(&ray, &k).unwrap();
            assert!((uv2 - uv).norm() < 1e-6);
        }
    }

    #[test]
    fn unproject_rejects_outside_region() {
        let k = DsIntrinsics::default();
        // r^2 limit for alpha = 0.59 is 1 / 0.18 in normalized units
        let far = Vector2::new(k.cx + k.fx * 3.0, k.cy);
        assert!(matches!(ds_unproject(&far, &k), Err(GeomError::InvalidPixel { .. })));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(DsIntrinsics::default().validate().is_ok());
        let bad = DsIntrinsics { alpha: 1.2, ..Default::default() };
        assert!(bad.validate().is_err());
        let wide = DsIntrinsics { fov_deg: 200.0, ..Default::default() };
        assert!(wide.validate().is_err());
    }
}
