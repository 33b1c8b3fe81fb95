//! Central finite-difference checks of the filter Jacobians.
//!
//! Each analytic matrix is compared against the numerical derivative of the
//! exact nonlinear map it linearizes. The maps are written out here from the
//! geometric primitives alone so they do not share code with the analytic
//! side.

use crate::eskf::{compute_fi, compute_fx, compute_h, reset_jacobian, ImuPairInput, Mat12, NominalState, Vec12};
use crate::geom::{quat_from_rotvec, quat_mul, rotmat_from_quat, rotvec_from_quat};
use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const DEFAULT_STATES: usize = 50;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JacobianReport {
    pub states: usize,
    pub fx: f64,
    pub fi: f64,
    pub h: f64,
    pub g: f64,
}

impl JacobianReport {
    pub fn max_error(&self) -> f64 {
        self.fx.max(self.fi).max(self.h).max(self.g)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_error() <= threshold
    }
}

/// Relative error `max|A - N| / max|N|`.
pub fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let scale = numeric.abs().max().max(1e-12);
    (analytic - numeric).abs().max() / scale
}

fn central_diff(f: impl Fn(&DVector<f64>) -> DVector<f64>, at: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    let m = f(at).len();
    let mut j = DMatrix::zeros(m, at.len());
    for k in 0..at.len() {
        let mut xp = at.clone();
        let mut xm = at.clone();
        xp[k] += eps;
        xm[k] -= eps;
        j.set_column(k, &((f(&xp) - f(&xm)) / (2.0 * eps)));
    }
    j
}

fn v3(d: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(d[i], d[i + 1], d[i + 2])
}

struct Truth {
    p: Vector3<f64>,
    v: Vector3<f64>,
    dq_a: UnitQuaternion<f64>,
    dq_b: UnitQuaternion<f64>,
}

/// Error state after one step, as a function of the error state and the
/// input noise before it. Accelerometer noise enters as a velocity impulse
/// and gyroscope noise as a right-multiplied rotation increment.
fn error_step(x: &NominalState, u: &ImuPairInput, dx: &DVector<f64>, n: &DVector<f64>) -> DVector<f64> {
    let dt = u.dt;
    let dq_a = quat_from_rotvec(&v3(dx, 6));
    let dq_b = quat_from_rotvec(&v3(dx, 9));
    let rb_err_t = rotmat_from_quat(&dq_b).inverse();
    let t = Truth { p: rb_err_t * (x.p + v3(dx, 0)), v: rb_err_t * (x.v + v3(dx, 3)), dq_a, dq_b };
    let q_t = quat_mul(&quat_mul(&t.dq_b.conjugate(), &x.q), &t.dq_a);

    let inc_a = quat_from_rotvec(&(u.w_a * dt));
    let inc_b = quat_from_rotvec(&(u.w_b * dt));
    let inc_a_t = quat_mul(&inc_a, &quat_from_rotvec(&(-v3(n, 3) * dt)));
    let inc_b_t = quat_mul(&inc_b, &quat_from_rotvec(&(-v3(n, 9) * dt)));

    // true relative motion
    let rbt_t = rotmat_from_quat(&inc_b_t).inverse();
    let acc_t = rotmat_from_quat(&q_t) * u.a_a - u.a_b;
    let impulse = (-(rotmat_from_quat(&q_t) * v3(n, 0)) + v3(n, 6)) * dt;
    let p_t1 = rbt_t * (t.p + t.v * dt + acc_t * (0.5 * dt * dt));
    let v_t1 = rbt_t * (t.v + acc_t * dt + impulse);

    // nominal motion
    let rbt = rotmat_from_quat(&inc_b).inverse();
    let acc = rotmat_from_quat(&x.q) * u.a_a - u.a_b;
    let p1 = rbt * (x.p + x.v * dt + acc * (0.5 * dt * dt));
    let v1 = rbt * (x.v + acc * dt);

    let dq_a1 = quat_mul(&quat_mul(&inc_a.conjugate(), &t.dq_a), &inc_a_t);
    let dq_b1 = quat_mul(&quat_mul(&inc_b.conjugate(), &t.dq_b), &inc_b_t);
    let rb1 = rotmat_from_quat(&dq_b1);

    let mut out = DVector::zeros(12);
    out.rows_mut(0, 3).copy_from(&(rb1 * p_t1 - p1));
    out.rows_mut(3, 3).copy_from(&(rb1 * v_t1 - v1));
    out.rows_mut(6, 3).copy_from(&rotvec_from_quat(&dq_a1));
    out.rows_mut(9, 3).copy_from(&rotvec_from_quat(&dq_b1));
    out
}

/// Measurement of the true state as a function of the error state,
/// differenced against the nominal measurement.
fn measure_error(x: &NominalState, dx: &DVector<f64>) -> DVector<f64> {
    let dq_a = quat_from_rotvec(&v3(dx, 6));
    let dq_b = quat_from_rotvec(&v3(dx, 9));
    let p_t = rotmat_from_quat(&dq_b).inverse() * (x.p + v3(dx, 0));
    let q_t = quat_mul(&quat_mul(&dq_b.conjugate(), &x.q), &dq_a);
    let p_ab_t = -(rotmat_from_quat(&q_t).inverse() * p_t);
    let p_ab = -(rotmat_from_quat(&x.q).inverse() * x.p);
    let mut out = DVector::zeros(9);
    out.rows_mut(0, 3).copy_from(&(p_t - x.p));
    out.rows_mut(3, 3).copy_from(&(p_ab_t - p_ab));
    out.rows_mut(6, 3).copy_from(&rotvec_from_quat(&quat_mul(&x.q.conjugate(), &q_t)));
    out
}

/// Reset map `dx -> dx_plus` taking the error relative to the old nominal
/// to the error relative to the injected nominal `x (+) dx_hat`.
///
/// Equating `R^T{dth_B}(p + dp)` before and after injection, with
/// `R{dth_B} = R{dth_hat_B} R{dth_B_plus}`, gives
/// `dp_plus = R^T{dth_hat_B}(dp - dp_hat)` exactly. Attitude errors use the
/// first-order expansion of `dq_plus = dq_hat^* (x) dq`.
fn reset_map(dx_hat: &DVector<f64>, dx: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(12);
    let rbt = rotmat_from_quat(&quat_from_rotvec(&v3(dx_hat, 9))).inverse();
    out.rows_mut(0, 3).copy_from(&(rbt * (v3(dx, 0) - v3(dx_hat, 0))));
    out.rows_mut(3, 3).copy_from(&(rbt * (v3(dx, 3) - v3(dx_hat, 3))));
    for off in [6usize, 9] {
        let h = v3(dx_hat, off);
        let d = v3(dx, off);
        out.rows_mut(off, 3).copy_from(&(d - h - h.cross(&d) * 0.5));
    }
    out
}

fn to_dmat(m: &Mat12) -> DMatrix<f64> {
    DMatrix::from_column_slice(12, 12, m.as_slice())
}

pub fn random_state(rng: &mut impl Rng) -> NominalState {
    let mut v = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    NominalState { p: v(10.0), v: v(3.0), q: quat_from_rotvec(&v(3.0)), t: 0.0 }
}

pub fn random_input(rng: &mut impl Rng) -> ImuPairInput {
    let mut v = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    ImuPairInput { a_a: v(15.0), w_a: v(3.0), a_b: v(15.0), w_b: v(3.0), dt: 0.01 }
}

pub fn check_fx(x: &NominalState, u: &ImuPairInput) -> f64 {
    let zero = DVector::zeros(12);
    let num = central_diff(|dx| error_step(x, u, dx, &zero), &zero, 1e-6);
    relative_error(&to_dmat(&compute_fx(x, u)), &num)
}

pub fn check_fi(x: &NominalState, u: &ImuPairInput) -> f64 {
    let zero = DVector::zeros(12);
    let num = central_diff(|n| error_step(x, u, &zero, n), &zero, 1e-6);
    relative_error(&to_dmat(&compute_fi(x, u)), &num)
}

pub fn check_h(x: &NominalState) -> f64 {
    let zero = DVector::zeros(12);
    let num = central_diff(|dx| measure_error(x, dx), &zero, 1e-6);
    let h = compute_h(x);
    relative_error(&DMatrix::from_column_slice(9, 12, h.as_slice()), &num)
}

pub fn check_g(dx_hat: &Vec12) -> f64 {
    let hat = DVector::from_column_slice(dx_hat.as_slice());
    let num = central_diff(|dx| reset_map(&hat, dx), &hat, 1e-6);
    relative_error(&to_dmat(&reset_jacobian(dx_hat)), &num)
}

/// Runs all four checks at `states` random states and returns the worst
/// relative error of each.
pub fn check_jacobians(states: usize, seed: u64) -> JacobianReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = JacobianReport { states, fx: 0.0, fi: 0.0, h: 0.0, g: 0.0 };
    for _ in 0..states {
        let x = random_state(&mut rng);
        let u = random_input(&mut rng);
        let mut dx_hat = Vec12::zeros();
        for i in 0..6 {
            dx_hat[i] = rng.random_range(-0.5..0.5);
        }
        let axis_a =
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let axis_b =
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let ang_a = rng.random_range(0.0..0.1);
        let ang_b = rng.random_range(0.0..0.1);
        dx_hat.fixed_rows_mut::<3>(6).copy_from(&(axis_a.normalize() * ang_a));
        dx_hat.fixed_rows_mut::<3>(9).copy_from(&(axis_b.normalize() * ang_b));

        r.fx = r.fx.max(check_fx(&x, &u));
        r.fi = r.fi.max(check_fi(&x, &u));
        r.h = r.h.max(check_h(&x));
        r.g = r.g.max(check_g(&dx_hat));
    }
    r
}
