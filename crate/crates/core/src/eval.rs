//! Trajectory error metrics: RMS absolute trajectory error in position and
//! rotation, per-sample error series and boxplot summaries.

use crate::geom::{rotation_angle_between, Pose};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const DEFAULT_ASSOCIATION_TOL: f64 = 0.005;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("fewer than 2 matched samples ({0})")]
    InsufficientOverlap(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub pose: Pose,
}

/// Estimated and ground-truth samples matched by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub matched: Vec<(f64, Pose, Pose)>,
}

impl TrajectoryPair {
    /// Pairs each estimate with the nearest ground-truth sample within `tol`.
    /// Both inputs must be sorted by time.
    pub fn associate(est: &[StampedPose], gt: &[StampedPose], tol: f64) -> Result<Self, EvalError> {
        let mut matched = Vec::new();
        let mut k = 0;
        for e in est {
            while k + 1 < gt.len() && (gt[k + 1].t - e.t).abs() <= (gt[k].t - e.t).abs() {
                k += 1;
            }
            if let Some(g) = gt.get(k) {
                if (g.t - e.t).abs() <= tol {
                    matched.push((e.t, e.pose, g.pose));
                }
            }
        }
        Self::from_matched(matched)
    }

    /// Builds a pair from samples already matched, requiring at least 2.
    pub fn from_matched(matched: Vec<(f64, Pose, Pose)>) -> Result<Self, EvalError> {
        if matched.len() < 2 {
            return Err(EvalError::InsufficientOverlap(matched.len()));
        }
        Ok(Self { matched })
    }

    pub fn len(&self) -> usize {
        self.matched.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matched.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub t: f64,
    pub pos_err: f64,
    pub rot_err_deg: f64,
}

pub fn pose_error(est: &Pose, gt: &Pose) -> (f64, f64) {
    (
        (est.translation - gt.translation).norm(),
        rotation_angle_between(&est.quaternion(), &gt.quaternion()).to_degrees(),
    )
}

pub fn error_series(pair: &TrajectoryPair) -> Vec<ErrorSample> {
    pair.matched
        .iter()
        .map(|(t, e, g)| {
            let (pos_err, rot_err_deg) = pose_error(e, g);
            ErrorSample { t: *t, pos_err, rot_err_deg }
        })
        .collect()
}

pub fn rms(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x * x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

pub fn ate_pos(pair: &TrajectoryPair) -> f64 {
    rms(error_series(pair).iter().map(|s| s.pos_err))
}

pub fn ate_rot(pair: &TrajectoryPair) -> f64 {
    rms(error_series(pair).iter().map(|s| s.rot_err_deg))
}

/// Linear-interpolated quantile of sorted data, `q` in [0, 1].
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Whisker ends: the most extreme samples within 1.5 IQR of the box.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

pub fn boxplot(xs: &[f64]) -> Option<BoxplotStats> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo && *x <= hi).collect();
    Some(BoxplotStats {
        min: v[0],
        q1,
        median: quantile_sorted(&v, 0.5),
        q3,
        max: v[v.len() - 1],
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        outliers: v.iter().copied().filter(|x| *x < lo || *x > hi).collect(),
    })
}

/// Summary of one estimated relative trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub observer: u32,
    pub target: u32,
    pub estimator: String,
    pub samples: usize,
    pub ate_pos_m: f64,
    pub ate_rot_deg: f64,
    pub median_pos_m: f64,
    pub median_rot_deg: f64,
    pub pos_box: BoxplotStats,
    pub rot_box: BoxplotStats,
}

impl PairMetrics {
    pub fn from_pair(observer: u32, target: u32, estimator: &str, pair: &TrajectoryPair) -> Self {
        let series = error_series(pair);
        let pos: Vec<f64> = series.iter().map(|s| s.pos_err).collect();
        let rot: Vec<f64> = series.iter().map(|s| s.rot_err_deg).collect();
        Self {
            observer,
            target,
            estimator: estimator.to_string(),
            samples: series.len(),
            ate_pos_m: rms(pos.iter().copied()),
            ate_rot_deg: rms(rot.iter().copied()),
            median_pos_m: median(&pos).unwrap_or(f64::NAN),
            median_rot_deg: median(&rot).unwrap_or(f64::NAN),
            pos_box: boxplot(&pos).expect("pair has samples"),
            rot_box: boxplot(&rot).expect("pair has samples"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub pairs: Vec<PairMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Mean ATE_pos over the pairs produced by `estimator`.
    pub fn mean_ate_pos(&self, estimator: &str) -> Option<f64> {
        let v: Vec<f64> = self.pairs.iter().filter(|p| p.estimator == estimator).map(|p| p.ate_pos_m).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Pose CSV row: `t,x,y,z,qw,qx,qy,qz` (seconds, meters, unit quaternion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
}

impl From<&StampedPose> for PoseRow {
    fn from(s: &StampedPose) -> Self {
        let q = s.pose.quaternion();
        let p = s.pose.translation;
        Self { t: s.t, x: p.x, y: p.y, z: p.z, qw: q.w, qx: q.i, qy: q.j, qz: q.k }
    }
}

impl From<&PoseRow> for StampedPose {
    fn from(r: &PoseRow) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(r.qw, r.qx, r.qy, r.qz));
        Self { t: r.t, pose: Pose::from_quat(&q, Vector3::new(r.x, r.y, r.z)) }
    }
}

pub fn write_pose_csv<W: Write>(w: W, poses: &[StampedPose]) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for p in poses {
        wr.serialize(PoseRow::from(p))?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_pose_csv<R: Read>(r: R) -> Result<Vec<StampedPose>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize::<PoseRow>().map(|row| Ok(StampedPose::from(&row?))).collect()
}

pub fn write_series_csv<W: Write>(w: W, series: &[ErrorSample]) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for s in series {
        wr.serialize(s)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_series_csv<R: Read>(r: R) -> Result<Vec<ErrorSample>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::EulerZyx;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn pose(x: f64, yaw_deg: f64) -> Pose {
        Pose::new(Rotation3::from_euler_angles(0.0, 0.0, yaw_deg.to_radians()), Vector3::new(x, 0.0, 0.0))
    }

    fn pair(est: &[Pose], gt: &[Pose]) -> TrajectoryPair {
        TrajectoryPair::from_matched(
            est.iter().zip(gt).enumerate().map(|(k, (e, g))| (k as f64 * 0.01, *e, *g)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = [pose(1.0, 10.0), pose(2.0, 20.0), pose(3.0, 30.0)];
        let p = pair(&gt, &gt);
        assert_eq!(ate_pos(&p), 0.0);
        assert!(ate_rot(&p) < 1e-6);
        assert!(error_series(&p).iter().all(|s| s.pos_err == 0.0));
    }

    #[test]
    fn constant_offsets() {
        let gt = [pose(1.0, 0.0), pose(2.0, 0.0)];
        let est = [pose(1.1, 2.0), pose(2.1, 2.0)];
        let p = pair(&est, &gt);
        assert!((ate_pos(&p) - 0.1).abs() < 1e-12);
        assert!((ate_rot(&p) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn mixed_offsets_hand_rms() {
        let gt = [pose(0.0, 0.0), pose(0.0, 0.0)];
        let est = [pose(0.0, 1.0), pose(0.2, 3.0)];
        let p = pair(&est, &gt);
        assert!((ate_pos(&p) - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((ate_rot(&p) - 5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn single_sample_series_and_overlap_error() {
        let m = vec![(0.0, pose(0.0, 0.0), pose(1.0, 0.0))];
        assert!(matches!(TrajectoryPair::from_matched(m.clone()), Err(EvalError::InsufficientOverlap(1))));
        let p = TrajectoryPair { matched: m };
        assert_eq!(error_series(&p).len(), 1);
    }

    #[test]
    fn association_respects_tolerance() {
        let gt: Vec<StampedPose> =
            (0..50).map(|k| StampedPose { t: k as f64 * 0.02, pose: pose(2.0 * k as f64, 0.0) }).collect();
        let est: Vec<StampedPose> =
            (0..50).map(|k| StampedPose { t: k as f64 * 0.02 + 0.004, pose: pose(2.0 * k as f64, 0.0) }).collect();
        let p = TrajectoryPair::associate(&est, &gt, DEFAULT_ASSOCIATION_TOL).unwrap();
        assert_eq!(p.len(), 50);
        assert_eq!(ate_pos(&p), 0.0);
        let late: Vec<StampedPose> = est.iter().map(|s| StampedPose { t: s.t + 0.002, ..*s }).collect();
        let p = TrajectoryPair::associate(&late, &gt, DEFAULT_ASSOCIATION_TOL);
        // 6 ms from every sample: nothing matches
        assert!(p.is_err());
    }

    #[test]
    fn boxplot_with_outlier() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 100.0];
        let b = boxplot(&xs).unwrap();
        assert_eq!(b.median, 3.5);
        assert_eq!(b.q1, 2.25);
        assert_eq!(b.q3, 4.75);
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!(b.whisker_hi, 5.0);
        assert_eq!(b.max, 100.0);
    }

    #[test]
    fn metrics_json_round_trip() {
        let gt = [pose(1.0, 0.0), pose(2.0, 0.0), pose(3.0, 5.0)];
        let est = [pose(1.1, 2.0), pose(2.1, 2.0), pose(2.7, 1.0)];
        let m = PairMetrics::from_pair(0, 1, "eskf", &pair(&est, &gt));
        let r = MetricsReport { scenario: "x".into(), seed: 3, pairs: vec![m] };
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.mean_ate_pos("eskf"), Some(r.pairs[0].ate_pos_m));
        assert_eq!(back.mean_ate_pos("pgo"), None);
    }

    #[test]
    fn pose_csv_round_trip() {
        let poses: Vec<StampedPose> = (0..5)
            .map(|k| StampedPose {
                t: k as f64 * 0.1,
                pose: Pose::new(EulerZyx::new(0.1, 0.2, k as f64).to_rotation(), Vector3::new(k as f64, 1.0, -2.0)),
            })
            .collect();
        let mut buf = Vec::new();
        write_pose_csv(&mut buf, &poses).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("t,x,y,z,qw,qx,qy,qz\n"));
        let back = read_pose_csv(buf.as_slice()).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            let (dp, dr) = pose_error(&a.pose, &b.pose);
            assert!(dp == 0.0 && dr < 1e-9);
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-3.0..3.0f64, -1.4..1.4f64, -3.0..3.0f64, -20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64)
            .prop_map(|(r, p, y, a, b, c)| Pose::new(EulerZyx::new(r, p, y).to_rotation(), Vector3::new(a, b, c)))
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_common_rigid_transform(
            est in prop::collection::vec(arb_pose(), 2..10),
            noise in prop::collection::vec(arb_pose(), 10),
            w in arb_pose(),
        ) {
            let gt: Vec<Pose> = est.iter().zip(&noise).map(|(e, n)| *e * Pose::new(n.rotation, n.translation * 0.01)).collect();
            let a = pair(&est, &gt);
            let moved_est: Vec<Pose> = est.iter().map(|p| w * *p).collect();
            let moved_gt: Vec<Pose> = gt.iter().map(|p| w * *p).collect();
            let b = pair(&moved_est, &moved_gt);
            prop_assert!((ate_pos(&a) - ate_pos(&b)).abs() < 1e-9);
            prop_assert!((ate_rot(&a) - ate_rot(&b)).abs() < 1e-6);
        }

        #[test]
        fn ate_pos_is_rms_of_series_and_rot_in_range(
            est in prop::collection::vec(arb_pose(), 2..10),
            gt in prop::collection::vec(arb_pose(), 10),
        ) {
            let p = pair(&est, &gt[..est.len()]);
            let series = error_series(&p);
            let hand = (series.iter().map(|s| s.pos_err * s.pos_err).sum::<f64>() / series.len() as f64).sqrt();
            prop_assert!((ate_pos(&p) - hand).abs() < 1e-12);
            prop_assert!(series.iter().all(|s| (0.0..=180.0).contains(&s.rot_err_deg)));
        }

        #[test]
        fn median_matches_sort_oracle(xs in prop::collection::vec(-1e3..1e3f64, 1..50)) {
            let mut v = xs.clone();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            let want = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            prop_assert!((median(&xs).unwrap() - want).abs() < 1e-9);
        }
    }
}
