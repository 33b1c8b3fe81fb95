//! Closed-form relative pose from one frame of mutual observations.
//!
//! Robot B observes A (and A observes B) through the fisheye camera, the UWB
//! link gives their distance and each IMU gives its own roll and pitch. The
//! relative position is range times bearing. For the orientation, both
//! bearings are rotated into gravity-aligned frames where only yaw is
//! unknown. The two horizontal azimuths then fix the relative yaw, because
//! the two sight lines are antiparallel.

use crate::geom::{self, GeomError, GIMBAL_GUARD_DEG};
use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Aligned bearings whose horizontal component is shorter than this are rejected.
pub const VERTICAL_DEGENERACY_XY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum RawPoseError {
    #[error("pitch of {pitch_deg:.3} deg is inside the gimbal guard")]
    GimbalLock { pitch_deg: f64 },
    #[error("sight line is too close to vertical (horizontal norm {xy_norm:.4})")]
    VerticalDegeneracy { xy_norm: f64 },
    #[error("invalid observation: {0}")]
    InvalidObservation(&'static str),
}

impl From<GeomError> for RawPoseError {
    fn from(e: GeomError) -> Self {
        match e {
            GeomError::GimbalLock { pitch_deg } => RawPoseError::GimbalLock { pitch_deg },
            _ => RawPoseError::InvalidObservation("geometry error"),
        }
    }
}

/// Roll and pitch (radians) of one robot, as derived from its IMU.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RollPitch {
    pub roll: f64,
    pub pitch: f64,
}

impl RollPitch {
    pub fn new(roll: f64, pitch: f64) -> Self {
        Self { roll, pitch }
    }

    fn check(&self) -> Result<(), RawPoseError> {
        if self.pitch.abs().to_degrees() > GIMBAL_GUARD_DEG {
            return Err(RawPoseError::GimbalLock { pitch_deg: self.pitch.to_degrees() });
        }
        Ok(())
    }

    /// `R_pitch * R_roll`, the body-to-gravity-aligned rotation.
    pub fn tilt(&self) -> Rotation3<f64> {
        geom::rot_pitch(self.pitch) * geom::rot_roll(self.roll)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualObservation {
    /// Unit bearing to A, in B's body frame.
    pub bearing_b_to_a: Vector3<f64>,
    /// Unit bearing to B, in A's body frame.
    pub bearing_a_to_b: Vector3<f64>,
    /// UWB distance, meters.
    pub range: f64,
    pub rp_a: RollPitch,
    pub rp_b: RollPitch,
    pub t: f64,
}

/// One raw relative pose: A's position in B, B's position in A, and A's
/// orientation in B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoseMeasurement {
    pub p_ba: Vector3<f64>,
    pub p_ab: Vector3<f64>,
    pub q_ba: UnitQuaternion<f64>,
    pub t: f64,
}

impl RawPoseMeasurement {
    pub fn pose(&self) -> geom::Pose {
        geom::Pose::from_quat(&self.q_ba, self.p_ba)
    }
}

pub fn relative_position(bearing: &Vector3<f64>, range: f64) -> Vector3<f64> {
    bearing * range
}

pub fn gravity_align(bearing: &Vector3<f64>, rp: &RollPitch) -> Result<Vector3<f64>, RawPoseError> {
    rp.check()?;
    Ok(rp.tilt() * bearing)
}

/// Azimuth of the horizontal projection, in `(-pi, pi]`.
pub fn projected_azimuth(aligned: &Vector3<f64>) -> Result<f64, RawPoseError> {
    let xy_norm = aligned.x.hypot(aligned.y);
    if xy_norm < VERTICAL_DEGENERACY_XY {
        return Err(RawPoseError::VerticalDegeneracy { xy_norm });
    }
    Ok(geom::wrap_angle(aligned.y.atan2(aligned.x)))
}

/// Relative yaw from the azimuth of A seen by B and the azimuth of B seen by A.
pub fn relative_yaw(psi_b: f64, psi_a: f64) -> f64 {
    geom::wrap_angle(psi_b - psi_a + PI)
}

pub fn relative_rotation(obs: &MutualObservation) -> Result<Rotation3<f64>, RawPoseError> {
    let psi_b = projected_azimuth(&gravity_align(&obs.bearing_b_to_a, &obs.rp_b)?)?;
    let psi_a = projected_azimuth(&gravity_align(&obs.bearing_a_to_b, &obs.rp_a)?)?;
    let yaw = geom::rot_yaw(relative_yaw(psi_b, psi_a));
    let r = obs.rp_b.tilt().inverse() * yaw * obs.rp_a.tilt();
    // products of exact rotations can drift off SO(3) by rounding only
    Ok(Rotation3::from_matrix(r.matrix()))
}

pub fn raw_estimate(obs: &MutualObservation) -> Result<RawPoseMeasurement, RawPoseError> {
    if !(obs.range >= 0.0) || !obs.range.is_finite() {
        return Err(RawPoseError::InvalidObservation("range must be finite and non-negative"));
    }
    let rot = relative_rotation(obs)?;
    Ok(RawPoseMeasurement {
        p_ba: relative_position(&obs.bearing_b_to_a, obs.range),
        p_ab: relative_position(&obs.bearing_a_to_b, obs.range),
        q_ba: UnitQuaternion::from_rotation_matrix(&rot),
        t: obs.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{euler_zyx_from_rotation, EulerZyx, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Config {
        a: Pose,
        b: Pose,
    }

    /// Observation and ground truth straight from world poses.
    fn observe(c: &Config) -> (MutualObservation, Pose) {
        let d = c.a.translation - c.b.translation;
        let range = d.norm();
        let ea = euler_zyx_from_rotation(&c.a.rotation).unwrap();
        let eb = euler_zyx_from_rotation(&c.b.rotation).unwrap();
        let obs = MutualObservation {
            bearing_b_to_a: c.b.rotation.inverse() * d / range,
            bearing_a_to_b: c.a.rotation.inverse() * (-d) / range,
            range,
            rp_a: RollPitch::new(ea.roll, ea.pitch),
            rp_b: RollPitch::new(eb.roll, eb.pitch),
            t: 0.0,
        };
        (obs, c.b.inverse() * c.a)
    }

    fn random_config(rng: &mut ChaCha8Rng) -> Config {
        let att = |rng: &mut ChaCha8Rng| {
            EulerZyx::new(
                rng.random_range(-PI..PI),
                rng.random_range(-80f64..80.0).to_radians(),
                rng.random_range(-PI..PI),
            )
            .to_rotation()
        };
        let elev = rng.random_range(-80f64..80.0).to_radians();
        let az = rng.random_range(-PI..PI);
        let dir = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
        let pb = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..5.0));
        let range = rng.random_range(0.5..50.0);
        Config { a: Pose::new(att(rng), pb + dir * range), b: Pose::new(att(rng), pb) }
    }

    #[test]
    fn position_from_range_and_bearing() {
        assert_eq!(relative_position(&Vector3::x(), 5.0), Vector3::new(5.0, 0.0, 0.0));
        assert_eq!(relative_position(&Vector3::y(), 0.0), Vector3::zeros());
    }

    #[test]
    fn gravity_alignment() {
        let b = Vector3::new(0.6, 0.0, 0.8);
        assert_eq!(gravity_align(&b, &RollPitch::default()).unwrap(), b);
        let err = gravity_align(&b, &RollPitch::new(0.0, PI / 2.0));
        assert!(matches!(err, Err(RawPoseError::GimbalLock { .. })));
    }

    #[test]
    fn aligned_bearing_keeps_world_elevation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let c = random_config(&mut rng);
            let (obs, _) = observe(&c);
            let aligned = gravity_align(&obs.bearing_b_to_a, &obs.rp_b).unwrap();
            let world = (c.a.translation - c.b.translation).normalize();
            assert!((aligned.z - world.z).abs() < 1e-12);
        }
    }

    #[test]
    fn azimuths() {
        assert_eq!(projected_azimuth(&Vector3::new(1.0, 0.0, 0.2)).unwrap(), 0.0);
        assert!((projected_azimuth(&Vector3::new(0.0, 1.0, -0.5)).unwrap() - PI / 2.0).abs() < 1e-15);
        let up = Vector3::new(0.001, 0.0, (1.0f64 - 1e-6).sqrt());
        assert!(matches!(projected_azimuth(&up), Err(RawPoseError::VerticalDegeneracy { .. })));
    }

    #[test]
    fn relative_yaw_cases() {
        assert!((relative_yaw(0.0, 0.0) - PI).abs() < 1e-15);
        assert!((relative_yaw(PI / 2.0, PI / 2.0) - PI).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let y = relative_yaw(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            assert!(y > -PI && y <= PI);
        }
    }

    #[test]
    fn relative_yaw_is_world_yaw_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let c = random_config(&mut rng);
            let (obs, _) = observe(&c);
            let psi_b = projected_azimuth(&gravity_align(&obs.bearing_b_to_a, &obs.rp_b).unwrap()).unwrap();
            let psi_a = projected_azimuth(&gravity_align(&obs.bearing_a_to_b, &obs.rp_a).unwrap()).unwrap();
            let ya = euler_zyx_from_rotation(&c.a.rotation).unwrap().yaw;
            let yb = euler_zyx_from_rotation(&c.b.rotation).unwrap().yaw;
            let diff = geom::wrap_angle(relative_yaw(psi_b, psi_a) - (ya - yb));
            assert!(diff.abs() < 1e-9);
        }
    }

    #[test]
    fn level_robots_facing_each_other() {
        let c = Config {
            a: Pose::new(geom::rot_yaw(PI), Vector3::new(4.0, 0.0, 1.0)),
            b: Pose::new(Rotation3::identity(), Vector3::new(0.0, 0.0, 1.0)),
        };
        let (obs, _) = observe(&c);
        let r = relative_rotation(&obs).unwrap();
        assert!((r.matrix() - geom::rot_yaw(PI).matrix()).norm() < 1e-12);
    }

    #[test]
    fn noiseless_raw_estimate_matches_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..2000 {
            let c = random_config(&mut rng);
            let (obs, truth) = observe(&c);
            let z = raw_estimate(&obs).unwrap();
            assert!((z.p_ba - truth.translation).norm() < 1e-9);
            let q_true = truth.quaternion();
            assert!(geom::rotation_angle_between(&z.q_ba, &q_true) < 1e-9);
            // A's position in B and B's position in A are tied by the relative rotation
            let p_ab = -(geom::rotmat_from_quat(&z.q_ba).inverse() * z.p_ba);
            assert!((p_ab - z.p_ab).norm() < 1e-9);
            assert!((z.p_ba.norm() - obs.range).abs() < 1e-9);
            assert!((z.p_ab.norm() - obs.range).abs() < 1e-9);
        }
    }

    #[test]
    fn common_world_yaw_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let c = random_config(&mut rng);
            let spin = Pose::new(geom::rot_yaw(rng.random_range(-PI..PI)), Vector3::new(1.0, -2.0, 0.0));
            let spun = Config { a: spin * c.a, b: spin * c.b };
            let z0 = raw_estimate(&observe(&c).0).unwrap();
            let z1 = raw_estimate(&observe(&spun).0).unwrap();
            assert!((z0.p_ba - z1.p_ba).norm() < 1e-9);
            assert!(geom::rotation_angle_between(&z0.q_ba, &z1.q_ba) < 1e-9);
        }
    }

    #[test]
    fn zero_range_still_gives_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let c = random_config(&mut rng);
        let (mut obs, truth) = observe(&c);
        obs.range = 0.0;
        let z = raw_estimate(&obs).unwrap();
        assert_eq!(z.p_ba, Vector3::zeros());
        assert_eq!(z.p_ab, Vector3::zeros());
        assert!(geom::rotation_angle_between(&z.q_ba, &truth.quaternion()) < 1e-9);
    }

    #[test]
    fn noisy_output_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..500 {
            let c = random_config(&mut rng);
            let (mut obs, _) = observe(&c);
            obs.bearing_b_to_a = (obs.bearing_b_to_a + Vector3::new(0.05, -0.03, 0.02)).normalize();
            obs.rp_a.roll += 0.01;
            let r = relative_rotation(&obs).unwrap().into_inner();
            assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
