//! Deterministic multi-robot world: analytic ground-truth trajectories,
//! sensor synthesis, occlusion geometry and an in-process message bus.
//!
//! The world runs on an integer 1 kHz clock. A sensor with rate `f` fires on
//! ticks divisible by `1000 / f`, so all rates must divide 1000.

use crate::codec::{IdLibrary, LedSchedule};
use crate::geom::{ds_project, euler_zyx_from_quat, DsIntrinsics, EulerZyx, GeomError, Pose};
use crate::rawpose::RollPitch;
use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::path::Path as FsPath;

pub type RobotId = u32;

pub const GRAVITY: f64 = 9.81;
pub const CLOCK_HZ: u32 = 1000;
pub const UWB_MAX_RANGE: f64 = 500.0;
const MICRO_G: f64 = 1e-6 * GRAVITY;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("time {t} outside trajectory domain [0, {duration}]")]
    OutOfDomain { t: f64, duration: f64 },
    #[error("invalid world: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn default_seed() -> u64 {
    1
}

/// Sensor noise, in the units sensor datasheets use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Accelerometer noise density, ug/sqrt(Hz).
    pub accel_density: f64,
    /// Gyroscope noise density, deg/s/sqrt(Hz).
    pub gyro_density: f64,
    /// UWB range sigma, m.
    pub uwb_sigma: f64,
    /// Pixel noise sigma, px.
    pub pixel_sigma: f64,
    /// Roll/pitch estimate sigma, deg.
    pub attitude_rp_sigma: f64,
    /// Correlation time of the roll/pitch error, s. Absent means white.
    pub attitude_rp_tau: Option<f64>,
    /// Constant accelerometer bias, m/s^2 (body frame).
    pub accel_bias: [f64; 3],
    /// Constant gyroscope bias, rad/s (body frame).
    pub gyro_bias: [f64; 3],
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            accel_density: 183.3,
            gyro_density: 0.021,
            uwb_sigma: 0.05,
            pixel_sigma: 1.0,
            attitude_rp_sigma: 0.2,
            attitude_rp_tau: None,
            accel_bias: [0.0; 3],
            gyro_bias: [0.0; 3],
            seed: 1,
        }
    }
}

impl NoiseParams {
    pub fn zero(seed: u64) -> Self {
        Self {
            accel_density: 0.0,
            gyro_density: 0.0,
            uwb_sigma: 0.0,
            pixel_sigma: 0.0,
            attitude_rp_sigma: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let all = [self.accel_density, self.gyro_density, self.uwb_sigma, self.pixel_sigma, self.attitude_rp_sigma];
        if all.iter().any(|s| !(*s >= 0.0)) {
            return Err(SimError::InvalidConfig("noise sigmas must be >= 0".into()));
        }
        if matches!(self.attitude_rp_tau, Some(t) if !(t > 0.0)) {
            return Err(SimError::InvalidConfig("attitude_rp_tau must be > 0".into()));
        }
        Ok(())
    }

    /// Accelerometer density in SI units, m/s^2/sqrt(Hz).
    pub fn accel_density_si(&self) -> f64 {
        self.accel_density * MICRO_G
    }

    /// Gyroscope density in SI units, rad/s/sqrt(Hz).
    pub fn gyro_density_si(&self) -> f64 {
        self.gyro_density.to_radians()
    }

    /// Per-sample accelerometer sigma at sample interval `dt`.
    pub fn accel_sigma(&self, dt: f64) -> f64 {
        self.accel_density_si() / dt.sqrt()
    }

    pub fn gyro_sigma(&self, dt: f64) -> f64 {
        self.gyro_density_si() / dt.sqrt()
    }
}

/// `base + rate t + amp sin(2 pi freq t + phase)`, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Wave {
    pub base_deg: f64,
    pub rate_deg_s: f64,
    pub amp_deg: f64,
    pub freq_hz: f64,
    pub phase_deg: f64,
}

impl Wave {
    pub fn constant(deg: f64) -> Self {
        Self { base_deg: deg, ..Self::default() }
    }

    /// Value and first derivative, radians.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let w = 2.0 * PI * self.freq_hz;
        let arg = w * t + self.phase_deg.to_radians();
        let v = self.base_deg + self.rate_deg_s * t + self.amp_deg * arg.sin();
        let d = self.rate_deg_s + self.amp_deg * w * arg.cos();
        (v.to_radians(), d.to_radians())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    Static {
        position: [f64; 3],
    },
    /// Horizontal circle at `center` height.
    Circle {
        center: [f64; 3],
        radius: f64,
        /// Angular rate, rad/s.
        rate: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `center + amplitude * sin(freq t + phase)` per axis, freq in rad/s.
    Lissajous {
        center: [f64; 3],
        amplitude: [f64; 3],
        freq: [f64; 3],
        #[serde(default)]
        phase: [f64; 3],
    },
    /// Natural cubic spline through `[t, x, y, z]` knots.
    Waypoints {
        points: Vec<[f64; 4]>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttitudeSpec {
    Euler {
        #[serde(default)]
        roll: Wave,
        #[serde(default)]
        pitch: Wave,
        #[serde(default)]
        yaw: Wave,
    },
    /// Yaw keeps the body x axis pointed at `point` in the horizontal plane.
    FacePoint {
        point: [f64; 3],
        #[serde(default)]
        roll: Wave,
        #[serde(default)]
        pitch: Wave,
        #[serde(default)]
        yaw_offset_deg: f64,
    },
}

impl Default for AttitudeSpec {
    fn default() -> Self {
        AttitudeSpec::Euler { roll: Wave::default(), pitch: Wave::default(), yaw: Wave::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub path: PathSpec,
    #[serde(default)]
    pub attitude: AttitudeSpec,
    pub duration: f64,
}

/// Ground truth at one instant. Acceleration and velocity are in the world
/// frame, angular rate in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub angular_rate: Vector3<f64>,
}

impl TrajState {
    pub fn pose(&self) -> Pose {
        Pose::from_quat(&self.attitude, self.position)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Spline {
    t: Vec<f64>,
    y: Vec<[f64; 3]>,
    m: Vec<[f64; 3]>,
}

impl Spline {
    fn new(points: &[[f64; 4]]) -> Result<Self, SimError> {
        if points.len() < 2 {
            return Err(SimError::InvalidConfig("waypoints need at least 2 points".into()));
        }
        if points.windows(2).any(|w| !(w[1][0] > w[0][0])) {
            return Err(SimError::InvalidConfig("waypoint times must increase".into()));
        }
        let t: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let y: Vec<[f64; 3]> = points.iter().map(|p| [p[1], p[2], p[3]]).collect();
        let n = t.len();
        let mut m = vec![[0.0; 3]; n];
        if n > 2 {
            // Thomas algorithm on the interior second derivatives
            for ax in 0..3 {
                let k = n - 2;
                let mut a = vec![0.0; k];
                let mut b = vec![0.0; k];
                let mut c = vec![0.0; k];
                let mut d = vec![0.0; k];
                for i in 0..k {
                    let (h0, h1) = (t[i + 1] - t[i], t[i + 2] - t[i + 1]);
                    a[i] = h0;
                    b[i] = 2.0 * (h0 + h1);
                    c[i] = h1;
                    d[i] = 6.0 * ((y[i + 2][ax] - y[i + 1][ax]) / h1 - (y[i + 1][ax] - y[i][ax]) / h0);
                }
                for i in 1..k {
                    let w = a[i] / b[i - 1];
                    b[i] -= w * c[i - 1];
                    d[i] -= w * d[i - 1];
                }
                let mut x = vec![0.0; k];
                x[k - 1] = d[k - 1] / b[k - 1];
                for i in (0..k - 1).rev() {
                    x[i] = (d[i] - c[i] * x[i + 1]) / b[i];
                }
                for i in 0..k {
                    m[i + 1][ax] = x[i];
                }
            }
        }
        Ok(Self { t, y, m })
    }

    fn eval(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let n = self.t.len();
        let i = match self.t.partition_point(|&k| k <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - t) / h;
        let b = (t - self.t[i]) / h;
        let (mut p, mut v, mut acc) = (Vector3::zeros(), Vector3::zeros(), Vector3::zeros());
        for ax in 0..3 {
            let (y0, y1, m0, m1) = (self.y[i][ax], self.y[i + 1][ax], self.m[i][ax], self.m[i + 1][ax]);
            p[ax] = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
            v[ax] = (y1 - y0) / h - (3.0 * a * a - 1.0) / 6.0 * h * m0 + (3.0 * b * b - 1.0) / 6.0 * h * m1;
            acc[ax] = a * m0 + b * m1;
        }
        (p, v, acc)
    }
}

/// Trajectory with any spline precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    spec: TrajectorySpec,
    spline: Option<Spline>,
}

impl Trajectory {
    pub fn new(spec: TrajectorySpec) -> Result<Self, SimError> {
        if !(spec.duration > 0.0) {
            return Err(SimError::InvalidConfig("trajectory duration must be > 0".into()));
        }
        let spline = match &spec.path {
            PathSpec::Waypoints { points } => {
                let s = Spline::new(points)?;
                if s.t[0] > 0.0 || *s.t.last().unwrap() < spec.duration {
                    return Err(SimError::InvalidConfig("waypoints must cover [0, duration]".into()));
                }
                Some(s)
            }
            _ => None,
        };
        Ok(Self { spec, spline })
    }

    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    pub fn eval(&self, t: f64) -> Result<TrajState, SimError> {
        let duration = self.spec.duration;
        if !(-1e-9..=duration + 1e-9).contains(&t) {
            return Err(SimError::OutOfDomain { t, duration });
        }
        let (p, v, a) = match &self.spec.path {
            PathSpec::Static { position } => (Vector3::from(*position), Vector3::zeros(), Vector3::zeros()),
            PathSpec::Circle { center, radius, rate, phase } => {
                let th = rate * t + phase;
                let (s, c) = th.sin_cos();
                (
                    Vector3::from(*center) + Vector3::new(c, s, 0.0) * *radius,
                    Vector3::new(-s, c, 0.0) * (radius * rate),
                    Vector3::new(-c, -s, 0.0) * (radius * rate * rate),
                )
            }
            PathSpec::Lissajous { center, amplitude, freq, phase } => {
                let (mut p, mut v, mut a) = (Vector3::from(*center), Vector3::zeros(), Vector3::zeros());
                for ax in 0..3 {
                    let (s, c) = (freq[ax] * t + phase[ax]).sin_cos();
                    p[ax] += amplitude[ax] * s;
                    v[ax] = amplitude[ax] * freq[ax] * c;
                    a[ax] = -amplitude[ax] * freq[ax] * freq[ax] * s;
                }
                (p, v, a)
            }
            PathSpec::Waypoints { .. } => self.spline.as_ref().expect("built in new").eval(t),
        };
        let ((roll, droll), (pitch, dpitch), (yaw, dyaw)) = match &self.spec.attitude {
            AttitudeSpec::Euler { roll, pitch, yaw } => (roll.eval(t), pitch.eval(t), yaw.eval(t)),
            AttitudeSpec::FacePoint { point, roll, pitch, yaw_offset_deg } => {
                let d = Vector3::from(*point) - p;
                let r2 = d.x * d.x + d.y * d.y;
                let yaw = d.y.atan2(d.x) + yaw_offset_deg.to_radians();
                // d/dt atan2(dy, dx) with d' = -v
                let dyaw = if r2 > 1e-12 { (-d.x * v.y + d.y * v.x) / r2 } else { 0.0 };
                (roll.eval(t), pitch.eval(t), (yaw, dyaw))
            }
        };
        let e = EulerZyx::new(roll, pitch, yaw);
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let w = Vector3::new(droll - dyaw * sp, dpitch * cr + dyaw * sr * cp, -dpitch * sr + dyaw * cr * cp);
        Ok(TrajState { position: p, velocity: v, acceleration: a, attitude: e.to_quat(), angular_rate: w })
    }
}

pub fn eval_trajectory(spec: &TrajectorySpec, t: f64) -> Result<TrajState, SimError> {
    Trajectory::new(spec.clone())?.eval(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Obstacle {
    /// Axis-aligned box; `extents` are full side lengths.
    Box { center: [f64; 3], extents: [f64; 3] },
    /// Vertical cylinder of `radius` and full `height` about `center`.
    Cylinder { center: [f64; 3], radius: f64, height: f64 },
}

impl Obstacle {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = match self {
            Obstacle::Box { extents, .. } => extents.iter().all(|e| *e > 0.0),
            Obstacle::Cylinder { radius, height, .. } => *radius > 0.0 && *height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidConfig("obstacle extents must be positive".into()))
        }
    }

    /// Whether the closed segment `a`-`b` touches the obstacle.
    pub fn blocks(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let d = b - a;
        match *self {
            Obstacle::Box { center, extents } => {
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                for ax in 0..3 {
                    let (min, max) = (center[ax] - 0.5 * extents[ax], center[ax] + 0.5 * extents[ax]);
                    if d[ax].abs() < 1e-15 {
                        if a[ax] < min || a[ax] > max {
                            return false;
                        }
                    } else {
                        let (t0, t1) = ((min - a[ax]) / d[ax], (max - a[ax]) / d[ax]);
                        lo = lo.max(t0.min(t1));
                        hi = hi.min(t0.max(t1));
                    }
                }
                lo <= hi
            }
            Obstacle::Cylinder { center, radius, height } => {
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                let (zmin, zmax) = (center[2] - 0.5 * height, center[2] + 0.5 * height);
                if d.z.abs() < 1e-15 {
                    if a.z < zmin || a.z > zmax {
                        return false;
                    }
                } else {
                    let (t0, t1) = ((zmin - a.z) / d.z, (zmax - a.z) / d.z);
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
                let (ox, oy) = (a.x - center[0], a.y - center[1]);
                let qa = d.x * d.x + d.y * d.y;
                let qb = 2.0 * (ox * d.x + oy * d.y);
                let qc = ox * ox + oy * oy - radius * radius;
                if qa < 1e-15 {
                    if qc > 0.0 {
                        return false;
                    }
                } else {
                    let disc = qb * qb - 4.0 * qa * qc;
                    if disc < 0.0 {
                        return false;
                    }
                    let s = disc.sqrt();
                    lo = lo.max((-qb - s) / (2.0 * qa));
                    hi = hi.min((-qb + s) / (2.0 * qa));
                }
                lo <= hi
            }
        }
    }
}

pub fn line_of_sight(a: &Vector3<f64>, b: &Vector3<f64>, obstacles: &[Obstacle]) -> bool {
    !obstacles.iter().any(|o| o.blocks(a, b))
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(gauss(rng), gauss(rng), gauss(rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

/// Specific force and angular rate in the body frame, plus white noise at
/// the per-sample sigma for interval `dt` and any constant bias.
pub fn synth_imu(state: &TrajState, noise: &NoiseParams, dt: f64, rng: &mut impl Rng) -> ImuSample {
    let g = Vector3::new(0.0, 0.0, -GRAVITY);
    let r_t = state.attitude.inverse();
    let accel = r_t * (state.acceleration - g) + Vector3::from(noise.accel_bias) + gauss3(rng) * noise.accel_sigma(dt);
    let gyro = state.angular_rate + Vector3::from(noise.gyro_bias) + gauss3(rng) * noise.gyro_sigma(dt);
    ImuSample { accel, gyro }
}

/// Noisy range, clamped at zero. `None` beyond the radio's reach.
pub fn synth_uwb(p_i: &Vector3<f64>, p_j: &Vector3<f64>, noise: &NoiseParams, rng: &mut impl Rng) -> Option<f64> {
    let d = (p_i - p_j).norm();
    if d > UWB_MAX_RANGE {
        return None;
    }
    Some((d + gauss(rng) * noise.uwb_sigma).max(0.0))
}

/// Body-to-camera mounting. The camera frame has z along the optical axis,
/// x right and y down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum CameraMount {
    /// Optical axis along body +x.
    #[default]
    Forward,
    /// Optical axis along body +z.
    Up,
}

impl CameraMount {
    /// Rotation taking camera-frame vectors to the body frame.
    pub fn body_from_cam(&self) -> Rotation3<f64> {
        let cols = match self {
            CameraMount::Forward => {
                [Vector3::new(0.0, -1.0, 0.0), Vector3::new(0.0, 0.0, -1.0), Vector3::new(1.0, 0.0, 0.0)]
            }
            CameraMount::Up => [Vector3::new(0.0, -1.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 1.0)],
        };
        Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&cols))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Ground-truth identity of the detected robot, for bookkeeping only.
    pub peer: RobotId,
    pub pixel: Vector2<f64>,
    pub lit: bool,
}

pub struct CameraSetup<'a> {
    pub intrinsics: &'a DsIntrinsics,
    pub mount: CameraMount,
    pub obstacles: &'a [Obstacle],
    pub max_range: f64,
}

/// Projects the target's LED into the observer's camera. `None` when the
/// target is occluded, outside the field of view or beyond `max_range`.
pub fn synth_detection(
    observer: &Pose,
    target: &Vector3<f64>,
    cam: &CameraSetup,
    lit: bool,
    noise: &NoiseParams,
    rng: &mut impl Rng,
) -> Option<(Vector2<f64>, bool)> {
    let d = target - observer.translation;
    if d.norm() > cam.max_range || !line_of_sight(&observer.translation, target, cam.obstacles) {
        return None;
    }
    let p_cam = cam.mount.body_from_cam().inverse() * (observer.rotation.inverse() * d);
    let uv = ds_project(&p_cam, cam.intrinsics).ok()?;
    let n = Vector2::new(gauss(rng), gauss(rng)) * noise.pixel_sigma;
    Some((uv + n, lit))
}

/// True roll and pitch plus independent white noise.
pub fn synth_attitude_rp(
    q: &UnitQuaternion<f64>,
    noise: &NoiseParams,
    rng: &mut impl Rng,
) -> Result<RollPitch, GeomError> {
    let e = euler_zyx_from_quat(q)?;
    let s = noise.attitude_rp_sigma.to_radians();
    Ok(RollPitch::new(e.roll + gauss(rng) * s, e.pitch + gauss(rng) * s))
}

/// First-order Gauss-Markov roll/pitch error with stationary sigma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpErrorProcess {
    sigma: f64,
    tau: f64,
    state: [f64; 2],
}

impl RpErrorProcess {
    pub fn new(sigma_deg: f64, tau: f64, rng: &mut impl Rng) -> Self {
        let sigma = sigma_deg.to_radians();
        Self { sigma, tau, state: [gauss(rng) * sigma, gauss(rng) * sigma] }
    }

    pub fn step(&mut self, dt: f64, rng: &mut impl Rng) -> [f64; 2] {
        let phi = (-dt / self.tau).exp();
        let drive = self.sigma * (1.0 - phi * phi).sqrt();
        for s in &mut self.state {
            *s = phi * *s + drive * gauss(rng);
        }
        self.state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rates {
    pub imu_hz: u32,
    pub camera_hz: u32,
    pub uwb_hz: u32,
}

impl Default for Rates {
    fn default() -> Self {
        Self { imu_hz: 100, camera_hz: 200, uwb_hz: 50 }
    }
}

impl Rates {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, r) in [("imu_hz", self.imu_hz), ("camera_hz", self.camera_hz), ("uwb_hz", self.uwb_hz)] {
            if r == 0 || !CLOCK_HZ.is_multiple_of(r) {
                return Err(SimError::InvalidConfig(format!("{name} must be a positive divisor of {CLOCK_HZ}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotSpec {
    pub id: RobotId,
    pub trajectory: TrajectorySpec,
    pub led_id: u8,
    /// LED schedule start offset, s.
    pub led_phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub robots: Vec<RobotSpec>,
    pub noise: NoiseParams,
    pub camera: DsIntrinsics,
    pub mount: CameraMount,
    pub rates: Rates,
    pub obstacles: Vec<Obstacle>,
    pub duration: f64,
    pub max_detection_range: f64,
    pub library: IdLibrary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotFrame {
    pub id: RobotId,
    pub imu: Option<ImuSample>,
    pub attitude_rp: Option<RollPitch>,
    pub uwb: Vec<(RobotId, f64)>,
    /// `Some` on camera ticks, listing every visible peer.
    pub detections: Option<Vec<Detection>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub tick: u64,
    pub t: f64,
    pub robots: Vec<RobotFrame>,
}

struct RobotRuntime {
    spec: RobotSpec,
    traj: Trajectory,
    schedule: LedSchedule,
    rp_err: Option<RpErrorProcess>,
}

pub struct World {
    cfg: WorldConfig,
    robots: Vec<RobotRuntime>,
    rng: ChaCha8Rng,
    tick: u64,
    last_tick: u64,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self, SimError> {
        cfg.noise.validate()?;
        cfg.rates.validate()?;
        cfg.camera.validate()?;
        for o in &cfg.obstacles {
            o.validate()?;
        }
        if cfg.robots.len() < 2 {
            return Err(SimError::InvalidConfig("need at least 2 robots".into()));
        }
        let mut ids: Vec<RobotId> = cfg.robots.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::InvalidConfig("robot ids must be unique".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
        let mut robots = Vec::new();
        for r in &cfg.robots {
            if r.trajectory.duration < cfg.duration {
                return Err(SimError::InvalidConfig(format!("robot {} trajectory shorter than the run", r.id)));
            }
            let schedule =
                cfg.library.schedule(r.led_id).map_err(|e| SimError::InvalidConfig(format!("robot {}: {e}", r.id)))?;
            let rp_err =
                cfg.noise.attitude_rp_tau.map(|tau| RpErrorProcess::new(cfg.noise.attitude_rp_sigma, tau, &mut rng));
            robots.push(RobotRuntime {
                spec: r.clone(),
                traj: Trajectory::new(r.trajectory.clone())?,
                schedule,
                rp_err,
            });
        }
        let last_tick = (cfg.duration * CLOCK_HZ as f64).round() as u64;
        Ok(Self { cfg, robots, rng, tick: 0, last_tick })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn truth(&self, id: RobotId, t: f64) -> Result<TrajState, SimError> {
        let r = self
            .robots
            .iter()
            .find(|r| r.spec.id == id)
            .ok_or_else(|| SimError::InvalidConfig(format!("unknown robot {id}")))?;
        r.traj.eval(t)
    }

    pub fn trajectory(&self, id: RobotId) -> Option<&Trajectory> {
        self.robots.iter().find(|r| r.spec.id == id).map(|r| &r.traj)
    }

    fn fires(&self, rate: u32) -> bool {
        self.tick.is_multiple_of(u64::from(CLOCK_HZ / rate))
    }

    /// Advances to the next tick on which any sensor fires and returns its
    /// frame; `None` past the end of the run.
    pub fn next_frame(&mut self) -> Option<SensorFrame> {
        let r = self.cfg.rates;
        while self.tick <= self.last_tick {
            let (imu, cam, uwb) = (self.fires(r.imu_hz), self.fires(r.camera_hz), self.fires(r.uwb_hz));
            if imu || cam || uwb {
                let f = self.synthesize(imu, cam, uwb);
                self.tick += 1;
                return Some(f);
            }
            self.tick += 1;
        }
        None
    }

    fn synthesize(&mut self, imu: bool, cam: bool, uwb: bool) -> SensorFrame {
        let t = self.tick as f64 / CLOCK_HZ as f64;
        let states: Vec<TrajState> =
            self.robots.iter().map(|r| r.traj.eval(t).expect("tick inside duration")).collect();
        let imu_dt = 1.0 / self.cfg.rates.imu_hz as f64;
        let noise = self.cfg.noise;
        let mut frames: Vec<RobotFrame> = self
            .robots
            .iter()
            .map(|r| RobotFrame { id: r.spec.id, imu: None, attitude_rp: None, uwb: Vec::new(), detections: None })
            .collect();
        let rng = &mut self.rng;

        if imu {
            for (k, r) in self.robots.iter_mut().enumerate() {
                frames[k].imu = Some(synth_imu(&states[k], &noise, imu_dt, rng));
                let e = euler_zyx_from_quat(&states[k].attitude).ok();
                frames[k].attitude_rp = e.map(|e| match r.rp_err.as_mut() {
                    Some(p) => {
                        let d = p.step(imu_dt, rng);
                        RollPitch::new(e.roll + d[0], e.pitch + d[1])
                    }
                    None => {
                        let s = noise.attitude_rp_sigma.to_radians();
                        RollPitch::new(e.roll + gauss(rng) * s, e.pitch + gauss(rng) * s)
                    }
                });
            }
        }
        if uwb {
            for i in 0..states.len() {
                for j in i + 1..states.len() {
                    if let Some(d) = synth_uwb(&states[i].position, &states[j].position, &noise, rng) {
                        let (a, b) = (self.robots[i].spec.id, self.robots[j].spec.id);
                        frames[i].uwb.push((b, d));
                        frames[j].uwb.push((a, d));
                    }
                }
            }
        }
        if cam {
            let setup = CameraSetup {
                intrinsics: &self.cfg.camera,
                mount: self.cfg.mount,
                obstacles: &self.cfg.obstacles,
                max_range: self.cfg.max_detection_range,
            };
            for i in 0..states.len() {
                let obs = states[i].pose();
                let mut dets = Vec::new();
                for (j, (target, st)) in self.robots.iter().zip(&states).enumerate() {
                    if i == j {
                        continue;
                    }
                    let lit = target.schedule.is_lit(t - target.spec.led_phase);
                    if let Some((pixel, lit)) = synth_detection(&obs, &st.position, &setup, lit, &noise, rng) {
                        dets.push(Detection { peer: target.spec.id, pixel, lit });
                    }
                }
                frames[i].detections = Some(dets);
            }
        }
        SensorFrame { tick: self.tick, t, robots: frames }
    }
}

/// Fixed-latency, lossy broadcast bus. Each receiver has its own FIFO, so
/// delivery order per sender is preserved.
#[derive(Debug, Clone)]
pub struct Bus<P> {
    latency: f64,
    loss: f64,
    rng: ChaCha8Rng,
    queues: BTreeMap<RobotId, VecDeque<(f64, RobotId, P)>>,
}

impl<P: Clone> Bus<P> {
    pub fn new(robots: &[RobotId], latency: f64, loss: f64, seed: u64) -> Self {
        Self {
            latency,
            loss,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queues: robots.iter().map(|r| (*r, VecDeque::new())).collect(),
        }
    }

    /// Broadcasts `packet` from `from` at time `t` to every other robot.
    pub fn publish(&mut self, from: RobotId, t: f64, packet: P) {
        let deliver = t + self.latency;
        for (to, q) in self.queues.iter_mut() {
            if *to == from {
                continue;
            }
            if self.loss > 0.0 && self.rng.random::<f64>() < self.loss {
                continue;
            }
            q.push_back((deliver, from, packet.clone()));
        }
    }

    /// Packets for `to` whose delivery time is at or before `t`.
    pub fn poll(&mut self, to: RobotId, t: f64) -> Vec<(RobotId, P)> {
        let mut out = Vec::new();
        if let Some(q) = self.queues.get_mut(&to) {
            while q.front().is_some_and(|(d, _, _)| *d <= t + 1e-9) {
                let (_, from, p) = q.pop_front().expect("front checked");
                out.push((from, p));
            }
        }
        out
    }
}

#[derive(Serialize)]
struct ImuRow {
    t: f64,
    robot: RobotId,
    ax: f64,
    ay: f64,
    az: f64,
    gx: f64,
    gy: f64,
    gz: f64,
}

#[derive(Serialize)]
struct AttitudeRow {
    t: f64,
    robot: RobotId,
    roll: f64,
    pitch: f64,
}

#[derive(Serialize)]
struct UwbRow {
    t: f64,
    robot: RobotId,
    peer: RobotId,
    range: f64,
}

#[derive(Serialize)]
struct DetectionRow {
    t: f64,
    robot: RobotId,
    peer: RobotId,
    u: f64,
    v: f64,
    lit: u8,
}

/// Writes `imu.csv`, `attitude.csv`, `uwb.csv` and `detections.csv` into `dir`.
///
/// Units: seconds, m/s^2, rad/s, rad, m, px.
pub fn write_sensor_csv(dir: &FsPath, frames: &[SensorFrame]) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    let mut imu = csv::Writer::from_path(dir.join("imu.csv"))?;
    let mut att = csv::Writer::from_path(dir.join("attitude.csv"))?;
    let mut uwb = csv::Writer::from_path(dir.join("uwb.csv"))?;
    let mut det = csv::Writer::from_path(dir.join("detections.csv"))?;
    for f in frames {
        for r in &f.robots {
            if let Some(s) = r.imu {
                imu.serialize(ImuRow {
                    t: f.t,
                    robot: r.id,
                    ax: s.accel.x,
                    ay: s.accel.y,
                    az: s.accel.z,
                    gx: s.gyro.x,
                    gy: s.gyro.y,
                    gz: s.gyro.z,
                })?;
            }
            if let Some(rp) = r.attitude_rp {
                att.serialize(AttitudeRow { t: f.t, robot: r.id, roll: rp.roll, pitch: rp.pitch })?;
            }
            for (peer, range) in &r.uwb {
                uwb.serialize(UwbRow { t: f.t, robot: r.id, peer: *peer, range: *range })?;
            }
            for d in r.detections.iter().flatten() {
                det.serialize(DetectionRow {
                    t: f.t,
                    robot: r.id,
                    peer: d.peer,
                    u: d.pixel.x,
                    v: d.pixel.y,
                    lit: d.lit as u8,
                })?;
            }
        }
    }
    for w in [&mut imu, &mut att, &mut uwb, &mut det] {
        w.flush()?;
    }
    Ok(())
}
