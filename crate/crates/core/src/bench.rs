//! Wall-clock timing of the hot paths: one raw pose, one filter cycle and one
//! five-robot graph solve.

use crate::eskf::{inject_and_reset, predict, update, ErrorBelief, FilterConfig, ImuPairInput, NominalState, Vec12};
use crate::geom::{EulerZyx, Pose};
use crate::pgo::{solve, Edge, PoseGraph, RobotId, SolveOptions};
use crate::rawpose::{raw_estimate, MutualObservation, RawPoseMeasurement, RollPitch};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::hint::black_box;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub name: String,
    pub reps: usize,
    pub median_us: f64,
    pub p99_us: f64,
}

fn time(name: &str, reps: usize, mut f: impl FnMut(usize)) -> Timing {
    let mut us: Vec<f64> = (0..reps)
        .map(|k| {
            let start = Instant::now();
            f(k);
            start.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    us.sort_by(f64::total_cmp);
    let at = |q: f64| us[((us.len() - 1) as f64 * q).round() as usize];
    Timing { name: name.to_string(), reps, median_us: at(0.5), p99_us: at(0.99) }
}

fn observation(a: &Pose, b: &Pose, t: f64) -> MutualObservation {
    let rp = |p: &Pose| {
        let e = crate::geom::euler_zyx_from_rotation(&p.rotation).expect("bench poses are far from gimbal lock");
        RollPitch::new(e.roll, e.pitch)
    };
    let d = a.translation - b.translation;
    MutualObservation {
        bearing_b_to_a: (b.rotation.inverse() * d).normalize(),
        bearing_a_to_b: (a.rotation.inverse() * -d).normalize(),
        range: d.norm(),
        rp_a: rp(a),
        rp_b: rp(b),
        t,
    }
}

fn random_pose(rng: &mut ChaCha8Rng, spread: f64) -> Pose {
    Pose::new(
        EulerZyx::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-3.0..3.0))
            .to_rotation(),
        Vector3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(0.5..2.0)),
    )
}

pub fn bench_raw(reps: usize) -> Timing {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs: Vec<MutualObservation> = (0..64)
        .map(|_| {
            let a = random_pose(&mut rng, 5.0);
            let b = random_pose(&mut rng, 5.0);
            observation(&a, &b, 0.0)
        })
        .collect();
    time("raw_estimate", reps, |k| {
        let _ = black_box(raw_estimate(black_box(&obs[k % obs.len()])));
    })
}

/// Predict over one IMU interval, then update, inject and reset.
pub fn bench_eskf(reps: usize) -> Timing {
    let cfg = FilterConfig::default();
    let mut x = NominalState {
        p: Vector3::new(3.0, 0.5, 0.2),
        v: Vector3::zeros(),
        q: EulerZyx::new(0.05, -0.03, 2.0).to_quat(),
        t: 0.0,
    };
    let mut b = ErrorBelief { delta: Vec12::zeros(), cov: cfg.init_cov };
    let u = ImuPairInput {
        a_a: Vector3::new(0.1, 0.0, 9.81),
        w_a: Vector3::new(0.01, 0.02, 0.1),
        a_b: Vector3::new(0.0, 0.1, 9.81),
        w_b: Vector3::new(-0.02, 0.01, 0.05),
        dt: 0.01,
    };
    time("eskf_cycle", reps, |_| {
        let (xp, bp) = predict(&x, &b, &u, &cfg).expect("dt > 0");
        let z = RawPoseMeasurement { p_ba: xp.p, p_ab: -(xp.q.inverse() * xp.p), q_ba: xp.q, t: xp.t };
        let bu = update(&xp, &bp, &z, &cfg).unwrap_or(bp);
        let (xn, bn) = inject_and_reset(&xp, &bu);
        x = black_box(xn);
        b = bn;
    })
}

/// Fully connected five-robot graph with noisy edges, started from the
/// composed ego edges.
pub fn five_robot_graph(seed: u64) -> PoseGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng, 4.0)).collect();
    let mut g = PoseGraph::new(0);
    for i in 0..5 {
        for j in 0..5 {
            if i == j {
                continue;
            }
            let noise = Pose::new(
                Rotation3::new(Vector3::new(
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                )),
                Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            );
            let t_ij = truth[i].inverse() * truth[j] * noise;
            if i == 0 {
                g.nodes.insert(j as RobotId, t_ij);
            }
            g.edges.push(Edge { i: i as RobotId, j: j as RobotId, t_ij, weight: 1.0 });
        }
    }
    g
}

pub fn bench_pgo(reps: usize) -> Timing {
    let graphs: Vec<PoseGraph> = (0..16).map(five_robot_graph).collect();
    let opts = SolveOptions::default();
    time("pgo_5_robots", reps, |k| {
        let _ = black_box(solve(black_box(&graphs[k % graphs.len()]), &opts));
    })
}

pub fn run_all(reps: usize) -> Vec<Timing> {
    vec![bench_raw(reps), bench_eskf(reps), bench_pgo(reps)]
}
