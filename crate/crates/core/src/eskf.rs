//! Error-state Kalman filter for the pose of a neighbour A expressed in the
//! moving body frame of the observer B.
//!
//! Nominal state `x = (p, v, q)` holds A's position, velocity difference and
//! attitude in B's frame. The error state `dx = (dp, dv, dth_A, dth_B)` keeps
//! separate small-angle errors for each robot's attitude. The true state is
//!
//! ```text
//! p_t = R^T{dth_B} (p + dp)
//! v_t = R^T{dth_B} (v + dv)
//! q_t = q{dth_B}^* (x) q (x) q{dth_A}
//! ```
//!
//! Both robots' IMU samples drive the prediction. Raw relative poses drive
//! the correction.

use crate::geom::{quat_from_rotvec, quat_mul, rotmat_from_quat, rotmat_from_rotvec, rotvec_from_quat, skew};
use crate::rawpose::RawPoseMeasurement;
use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};

pub type Mat12 = SMatrix<f64, 12, 12>;
pub type Vec12 = SVector<f64, 12>;
pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Vec9 = SVector<f64, 9>;
pub type Mat9x12 = SMatrix<f64, 9, 12>;

/// 0.999 quantile of the chi-square distribution with 9 degrees of freedom.
pub const CHI2_9_P999: f64 = 27.877_164_871_256_57;

// error-state block offsets
const DP: usize = 0;
const DV: usize = 3;
const DTA: usize = 6;
const DTB: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum EskfError {
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("measurement rejected by the innovation gate (d^2 = {mahalanobis:.2})")]
    Rejected { mahalanobis: f64 },
    #[error("non-positive time step {0}")]
    BadTimeStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBelief {
    pub delta: Vec12,
    pub cov: Mat12,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuPairInput {
    /// Specific force of A in A's body frame.
    pub a_a: Vector3<f64>,
    /// Angular rate of A in A's body frame.
    pub w_a: Vector3<f64>,
    pub a_b: Vector3<f64>,
    pub w_b: Vector3<f64>,
    pub dt: f64,
}

/// Measurement noise model. Both position blocks share a sigma that grows
/// with range; the orientation block is isotropic in rotation-vector space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementNoise {
    pub pos_sigma_floor: f64,
    pub pos_sigma_per_meter: f64,
    pub rot_sigma: f64,
    /// When set, the two position blocks are correlated through the shared
    /// range error with this sigma.
    pub shared_range_sigma: Option<f64>,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self {
            pos_sigma_floor: 0.05,
            pos_sigma_per_meter: 0.02,
            rot_sigma: 1.5f64.to_radians(),
            shared_range_sigma: None,
        }
    }
}

impl MeasurementNoise {
    pub fn covariance(&self, z: &RawPoseMeasurement) -> Mat9 {
        let range = z.p_ba.norm();
        let sp = self.pos_sigma_floor.max(self.pos_sigma_per_meter * range);
        let mut v = Mat9::zeros();
        for i in 0..6 {
            v[(i, i)] = sp * sp;
        }
        for i in 6..9 {
            v[(i, i)] = self.rot_sigma * self.rot_sigma;
        }
        if let (Some(sr), true) = (self.shared_range_sigma, range > 1e-9) {
            let ub = z.p_ba / range;
            let ua = z.p_ab / z.p_ab.norm().max(1e-9);
            let cross = ub * ua.transpose() * (sr * sr);
            v.fixed_view_mut::<3, 3>(0, 3).copy_from(&cross);
            v.fixed_view_mut::<3, 3>(3, 0).copy_from(&cross.transpose());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Continuous-time spectral density of the input noise
    /// `(a_nA, w_nA, a_nB, w_nB)`. The per-step covariance is this over `dt`.
    pub input_psd: Mat12,
    pub meas: MeasurementNoise,
    pub init_cov: Mat12,
    /// Chi-square threshold on the innovation; `None` disables gating.
    pub gate: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        // small MEMS IMU densities: 183.3 ug/sqrt(Hz), 0.021 deg/s/sqrt(Hz)
        Self::from_densities(183.3e-6 * 9.81, 0.021f64.to_radians())
    }
}

impl FilterConfig {
    /// Builds the filter from accelerometer (m/s^2/sqrt(Hz)) and gyroscope
    /// (rad/s/sqrt(Hz)) noise densities.
    pub fn from_densities(accel_density: f64, gyro_density: f64) -> Self {
        let mut psd = Mat12::zeros();
        for blk in 0..4 {
            let d = if blk % 2 == 0 { accel_density } else { gyro_density };
            for i in 0..3 {
                psd[(3 * blk + i, 3 * blk + i)] = d * d;
            }
        }
        let deg5 = 5f64.to_radians().powi(2);
        let init = [0.25, 0.25, 0.25, 0.1, 0.1, 0.1, deg5, deg5, deg5, deg5, deg5, deg5];
        Self {
            input_psd: psd,
            meas: MeasurementNoise::default(),
            init_cov: Mat12::from_diagonal(&Vec12::from_column_slice(&init)),
            gate: Some(CHI2_9_P999),
        }
    }

    pub fn input_cov(&self, dt: f64) -> Mat12 {
        self.input_psd / dt
    }
}

pub fn init_from_raw(z: &RawPoseMeasurement, cfg: &FilterConfig) -> (NominalState, ErrorBelief) {
    (
        NominalState { p: z.p_ba, v: Vector3::zeros(), q: z.q_ba, t: z.t },
        ErrorBelief { delta: Vec12::zeros(), cov: cfg.init_cov },
    )
}

/// Propagates the nominal state one step with the measured inputs.
pub fn propagate_nominal(x: &NominalState, u: &ImuPairInput) -> NominalState {
    let dt = u.dt;
    let inc_b = quat_from_rotvec(&(u.w_b * dt));
    let inc_a = quat_from_rotvec(&(u.w_a * dt));
    let rbt = rotmat_from_quat(&inc_b).inverse();
    let acc = rotmat_from_quat(&x.q) * u.a_a - u.a_b;
    NominalState {
        p: rbt * (x.p + x.v * dt + acc * (0.5 * dt * dt)),
        v: rbt * (x.v + acc * dt),
        q: quat_mul(&quat_mul(&inc_b.conjugate(), &x.q), &inc_a),
        t: x.t + dt,
    }
}

/// Transition matrix of the error state over one step.
///
/// The position row carries the half-step acceleration terms
/// `-1/2 dt^2 R^T{w_B dt} R{q} [a_A]x` and `1/2 dt^2 R^T{w_B dt} [a_B]x`, which
/// follow from the `1/2 a dt^2` term of the nominal position update.
pub fn compute_fx(x: &NominalState, u: &ImuPairInput) -> Mat12 {
    let dt = u.dt;
    let rbt = rotmat_from_rotvec(&(u.w_b * dt)).inverse().into_inner();
    let rat = rotmat_from_rotvec(&(u.w_a * dt)).inverse().into_inner();
    let rq = rotmat_from_quat(&x.q).into_inner();
    let d_th_a = -rbt * rq * skew(&u.a_a);
    let d_th_b = rbt * skew(&u.a_b);

    let mut f = Mat12::zeros();
    f.fixed_view_mut::<3, 3>(DP, DP).copy_from(&rbt);
    f.fixed_view_mut::<3, 3>(DP, DV).copy_from(&(rbt * dt));
    f.fixed_view_mut::<3, 3>(DP, DTA).copy_from(&(d_th_a * (0.5 * dt * dt)));
    f.fixed_view_mut::<3, 3>(DP, DTB).copy_from(&(d_th_b * (0.5 * dt * dt)));
    f.fixed_view_mut::<3, 3>(DV, DV).copy_from(&rbt);
    f.fixed_view_mut::<3, 3>(DV, DTA).copy_from(&(d_th_a * dt));
    f.fixed_view_mut::<3, 3>(DV, DTB).copy_from(&(d_th_b * dt));
    f.fixed_view_mut::<3, 3>(DTA, DTA).copy_from(&rat);
    f.fixed_view_mut::<3, 3>(DTB, DTB).copy_from(&rbt);
    f
}

/// Noise input matrix; columns follow `(a_nA, w_nA, a_nB, w_nB)`.
pub fn compute_fi(x: &NominalState, u: &ImuPairInput) -> Mat12 {
    let dt = u.dt;
    let rbt = rotmat_from_rotvec(&(u.w_b * dt)).inverse().into_inner();
    let rq = rotmat_from_quat(&x.q).into_inner();
    let mut f = Mat12::zeros();
    f.fixed_view_mut::<3, 3>(DV, 0).copy_from(&(-rbt * rq * dt));
    f.fixed_view_mut::<3, 3>(DV, 6).copy_from(&(rbt * dt));
    f.fixed_view_mut::<3, 3>(DTA, 3).copy_from(&(-Matrix3::identity() * dt));
    f.fixed_view_mut::<3, 3>(DTB, 9).copy_from(&(-Matrix3::identity() * dt));
    f
}

pub fn predict(
    x: &NominalState,
    b: &ErrorBelief,
    u: &ImuPairInput,
    cfg: &FilterConfig,
) -> Result<(NominalState, ErrorBelief), EskfError> {
    if !(u.dt > 0.0) {
        return Err(EskfError::BadTimeStep(u.dt));
    }
    let fx = compute_fx(x, u);
    let fi = compute_fi(x, u);
    let cov = fx * b.cov * fx.transpose() + fi * cfg.input_cov(u.dt) * fi.transpose();
    Ok((propagate_nominal(x, u), ErrorBelief { delta: fx * b.delta, cov: symmetrize(&cov) }))
}

/// `x (+) dx`.
pub fn compose(x: &NominalState, delta: &Vec12) -> NominalState {
    let dth_a: Vector3<f64> = delta.fixed_rows::<3>(DTA).into_owned();
    let dth_b: Vector3<f64> = delta.fixed_rows::<3>(DTB).into_owned();
    let rbt = rotmat_from_rotvec(&dth_b).inverse();
    let dq_a = quat_from_rotvec(&dth_a);
    let dq_b = quat_from_rotvec(&dth_b);
    NominalState {
        p: rbt * (x.p + delta.fixed_rows::<3>(DP)),
        v: rbt * (x.v + delta.fixed_rows::<3>(DV)),
        q: quat_mul(&quat_mul(&dq_b.conjugate(), &x.q), &dq_a),
        t: x.t,
    }
}

pub fn true_state(x: &NominalState, b: &ErrorBelief) -> NominalState {
    compose(x, &b.delta)
}

/// Predicted measurement `(p, -R^T{q} p, q)`.
pub fn measure(x: &NominalState) -> (Vector3<f64>, Vector3<f64>, UnitQuaternion<f64>) {
    let p_ab = -(rotmat_from_quat(&x.q).inverse() * x.p);
    (x.p, p_ab, x.q)
}

/// `z (-) h(x)`: position differences and the rotation vector of `q^-1 (x) q_z`.
pub fn innovation(x: &NominalState, z: &RawPoseMeasurement) -> Vec9 {
    let (p_ba, p_ab, q) = measure(x);
    let mut y = Vec9::zeros();
    y.fixed_rows_mut::<3>(0).copy_from(&(z.p_ba - p_ba));
    y.fixed_rows_mut::<3>(3).copy_from(&(z.p_ab - p_ab));
    y.fixed_rows_mut::<3>(6).copy_from(&rotvec_from_quat(&quat_mul(&q.conjugate(), &z.q_ba)));
    y
}

/// Measurement Jacobian with respect to the error state, at `dx = 0`.
pub fn compute_h(x: &NominalState) -> Mat9x12 {
    let rqt = rotmat_from_quat(&x.q).inverse().into_inner();
    let mut h = Mat9x12::zeros();
    h.fixed_view_mut::<3, 3>(0, DP).copy_from(&Matrix3::identity());
    h.fixed_view_mut::<3, 3>(0, DTB).copy_from(&skew(&x.p));
    h.fixed_view_mut::<3, 3>(3, DP).copy_from(&(-rqt));
    h.fixed_view_mut::<3, 3>(3, DTA).copy_from(&(-skew(&(rqt * x.p))));
    h.fixed_view_mut::<3, 3>(6, DTA).copy_from(&Matrix3::identity());
    h.fixed_view_mut::<3, 3>(6, DTB).copy_from(&(-rqt));
    h
}

/// Kalman correction of the error belief. The nominal state is untouched;
/// follow with [`inject_and_reset`].
pub fn update(
    x: &NominalState,
    b: &ErrorBelief,
    z: &RawPoseMeasurement,
    cfg: &FilterConfig,
) -> Result<ErrorBelief, EskfError> {
    let h = compute_h(x);
    let v = cfg.meas.covariance(z);
    let s = symmetrize(&(h * b.cov * h.transpose() + v));
    let chol = s.cholesky().ok_or(EskfError::SingularInnovation)?;
    // innovation about the current best estimate x (+) dx
    let y = innovation(&compose(x, &b.delta), z);
    let s_inv_y = chol.solve(&y);
    let d2 = y.dot(&s_inv_y);
    if let Some(gate) = cfg.gate {
        if d2 > gate {
            return Err(EskfError::Rejected { mahalanobis: d2 });
        }
    }
    let pht = b.cov * h.transpose();
    let k = chol.solve(&pht.transpose()).transpose();
    let cov = (Mat12::identity() - k * h) * b.cov;
    Ok(ErrorBelief { delta: b.delta + k * y, cov: symmetrize(&cov) })
}

/// Jacobian of the error reset `dx <- dx (-) dx_hat`, evaluated at `dx_hat`.
pub fn reset_jacobian(delta: &Vec12) -> Mat12 {
    let dth_a: Vector3<f64> = delta.fixed_rows::<3>(DTA).into_owned();
    let dth_b: Vector3<f64> = delta.fixed_rows::<3>(DTB).into_owned();
    let rbt = rotmat_from_rotvec(&dth_b).inverse().into_inner();
    let mut g = Mat12::zeros();
    g.fixed_view_mut::<3, 3>(DP, DP).copy_from(&rbt);
    g.fixed_view_mut::<3, 3>(DV, DV).copy_from(&rbt);
    g.fixed_view_mut::<3, 3>(DTA, DTA).copy_from(&(Matrix3::identity() - skew(&(dth_a * 0.5))));
    g.fixed_view_mut::<3, 3>(DTB, DTB).copy_from(&(Matrix3::identity() - skew(&(dth_b * 0.5))));
    g
}

pub fn inject_and_reset(x: &NominalState, b: &ErrorBelief) -> (NominalState, ErrorBelief) {
    let g = reset_jacobian(&b.delta);
    (compose(x, &b.delta), ErrorBelief { delta: Vec12::zeros(), cov: symmetrize(&(g * b.cov * g.transpose())) })
}

fn symmetrize<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

/// One relative-pose filter instance with zero-order-hold input handling.
///
/// The latest IMU pair is held and integrated up to every new event time,
/// so measurements are applied at their own timestamps.
#[derive(Debug, Clone)]
pub struct RelativeEskf {
    pub state: NominalState,
    pub belief: ErrorBelief,
    cfg: FilterConfig,
    held: Option<HeldInputs>,
    last_correction: f64,
    consecutive_rejections: usize,
    /// Longest single prediction step; longer gaps are subdivided.
    pub max_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeldInputs {
    a_a: Vector3<f64>,
    w_a: Vector3<f64>,
    a_b: Vector3<f64>,
    w_b: Vector3<f64>,
}

impl RelativeEskf {
    pub fn new(z: &RawPoseMeasurement, cfg: FilterConfig) -> Self {
        let (state, belief) = init_from_raw(z, &cfg);
        Self { state, belief, cfg, held: None, last_correction: z.t, consecutive_rejections: 0, max_step: 0.01 }
    }

    pub fn from_parts(state: NominalState, belief: ErrorBelief, cfg: FilterConfig) -> Self {
        Self { last_correction: state.t, state, belief, cfg, held: None, consecutive_rejections: 0, max_step: 0.01 }
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn last_correction(&self) -> f64 {
        self.last_correction
    }

    pub fn consecutive_rejections(&self) -> usize {
        self.consecutive_rejections
    }

    /// Replaces the held IMU inputs; call after [`advance_to`](Self::advance_to).
    pub fn set_inputs(&mut self, a_a: Vector3<f64>, w_a: Vector3<f64>, a_b: Vector3<f64>, w_b: Vector3<f64>) {
        self.held = Some(HeldInputs { a_a, w_a, a_b, w_b });
    }

    /// Predicts forward to `t` with the held inputs. Earlier times are ignored.
    pub fn advance_to(&mut self, t: f64) {
        let Some(h) = self.held else {
            // without IMU data the relative state is held constant
            if t > self.state.t {
                self.state.t = t;
            }
            return;
        };
        while t - self.state.t > 1e-12 {
            let dt = (t - self.state.t).min(self.max_step);
            let u = ImuPairInput { a_a: h.a_a, w_a: h.w_a, a_b: h.a_b, w_b: h.w_b, dt };
            let (x, b) = predict(&self.state, &self.belief, &u, &self.cfg).expect("dt is positive");
            self.state = x;
            self.belief = b;
            // pin the clock to avoid accumulating rounding in t
            if (t - self.state.t).abs() < 1e-12 {
                self.state.t = t;
            }
        }
    }

    /// Applies a raw measurement at its timestamp: predict, correct, inject, reset.
    pub fn correct(&mut self, z: &RawPoseMeasurement) -> Result<(), EskfError> {
        self.advance_to(z.t);
        match update(&self.state, &self.belief, z, &self.cfg) {
            Ok(b) => {
                let (x, b) = inject_and_reset(&self.state, &b);
                self.state = x;
                self.belief = b;
                self.last_correction = z.t;
                self.consecutive_rejections = 0;
                Ok(())
            }
            Err(e) => {
                if matches!(e, EskfError::Rejected { .. }) {
                    self.consecutive_rejections += 1;
                }
                Err(e)
            }
        }
    }

    pub fn estimate(&self) -> NominalState {
        true_state(&self.state, &self.belief)
    }
}
