//! Per-robot estimator stacks driven by the simulated world.
//!
//! Each robot tracks and decodes LED spots in its own camera, broadcasts its
//! IMU sample, roll/pitch and decoded bearings, and runs one relative filter
//! per neighbor. A raw pose is formed when both robots of a pair see each
//! other within the pairing tolerance and a fresh UWB range is at hand.
//! Robots acting as PGO egos periodically exchange their fresh filter
//! estimates and solve a single-frame pose graph.

use crate::codec::SpotTracker;
use crate::eskf::{EskfError, FilterConfig, MeasurementNoise, RelativeEskf};
use crate::eval::{
    error_series, write_pose_csv, write_series_csv, EvalError, MetricsReport, PairMetrics, StampedPose, TrajectoryPair,
};
use crate::geom::{ds_unproject, Pose};
use crate::pgo::{edges_from_filters, solve, Kernel, RelativeEstimate, SolveOptions};
use crate::rawpose::{raw_estimate, MutualObservation, RollPitch};
use crate::scenario::{Estimator, ScenarioConfig};
use crate::sim::{Bus, ImuSample, RobotFrame, RobotId, SensorFrame, SimError, Trajectory, World, CLOCK_HZ};
use nalgebra::{Vector2, Vector3};
use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

pub const RAW: &str = "raw";
pub const ESKF: &str = "eskf";
pub const PGO: &str = "pgo";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// What one robot broadcasts per sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorPacket {
    pub tick: u64,
    pub t: f64,
    pub imu: Option<ImuSample>,
    pub rp: Option<RollPitch>,
    /// Unit bearings, in the sender's body frame, to robots it decoded.
    pub bearings: Vec<(RobotId, Vector3<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Packet {
    Sensor(SensorPacket),
    Estimates(Vec<RelativeEstimate>),
}

#[derive(Debug, Clone)]
struct OwnRecord {
    packet: SensorPacket,
    ranges: Vec<(RobotId, f64)>,
}

/// Counters for one observer/target pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairStats {
    pub raw: usize,
    pub raw_failed: usize,
    pub corrections: usize,
    pub rejected: usize,
    pub reinits: usize,
}

#[derive(Debug, Clone)]
struct PairState {
    target: RobotId,
    filter: Option<RelativeEskf>,
    own_imu: Option<ImuSample>,
    peer_imu: Option<ImuSample>,
    own_rp: Option<(f64, RollPitch)>,
    peer_rp: Option<(f64, RollPitch)>,
    own_bearing: Option<(f64, Vector3<f64>)>,
    peer_bearing: Option<(f64, Vector3<f64>)>,
    range: Option<(f64, f64)>,
    raw: Vec<StampedPose>,
    eskf: Vec<StampedPose>,
    stats: PairStats,
}

struct Settings {
    mode: Estimator,
    filter: FilterConfig,
    bearing_tol: f64,
    range_max_age: f64,
    rp_max_age: f64,
    max_rejections: usize,
    reinit_after: f64,
}

impl PairState {
    fn new(target: RobotId) -> Self {
        Self {
            target,
            filter: None,
            own_imu: None,
            peer_imu: None,
            own_rp: None,
            peer_rp: None,
            own_bearing: None,
            peer_bearing: None,
            range: None,
            raw: Vec::new(),
            eskf: Vec::new(),
            stats: PairStats::default(),
        }
    }

    fn step(&mut self, me: RobotId, own: &OwnRecord, peer: &SensorPacket, s: &Settings) {
        let t = peer.t;
        if let Some(i) = own.packet.imu {
            self.own_imu = Some(i);
        }
        if let Some(i) = peer.imu {
            self.peer_imu = Some(i);
        }
        if let Some(f) = self.filter.as_mut() {
            f.advance_to(t);
        }
        if own.packet.imu.is_some() || peer.imu.is_some() {
            self.set_inputs();
        }
        if let Some(rp) = own.packet.rp {
            self.own_rp = Some((t, rp));
        }
        if let Some(rp) = peer.rp {
            self.peer_rp = Some((t, rp));
        }
        if let Some((_, r)) = own.ranges.iter().find(|(p, _)| *p == self.target) {
            self.range = Some((t, *r));
        }
        if let Some((_, b)) = own.packet.bearings.iter().find(|(p, _)| *p == self.target) {
            self.own_bearing = Some((t, *b));
        }
        if let Some((_, b)) = peer.bearings.iter().find(|(p, _)| *p == me) {
            self.peer_bearing = Some((t, *b));
        }
        self.try_raw(t, s);
        if let Some(f) = &self.filter {
            let x = f.estimate();
            self.eskf.push(StampedPose { t, pose: Pose::from_quat(&x.q, x.p) });
        }
    }

    fn set_inputs(&mut self) {
        if let (Some(f), Some(a), Some(b)) = (self.filter.as_mut(), self.peer_imu, self.own_imu) {
            f.set_inputs(a.accel, a.gyro, b.accel, b.gyro);
        }
    }

    fn try_raw(&mut self, t: f64, s: &Settings) {
        let (Some((tb, bb)), Some((ta, ba))) = (self.own_bearing, self.peer_bearing) else {
            return;
        };
        if (tb - ta).abs() > s.bearing_tol + 1e-9 {
            return;
        }
        let (Some((tr, range)), Some((tb_rp, rp_b)), Some((ta_rp, rp_a))) = (self.range, self.own_rp, self.peer_rp)
        else {
            return;
        };
        if t - tr > s.range_max_age + 1e-9 || t - tb_rp.min(ta_rp) > s.rp_max_age + 1e-9 {
            return;
        }
        self.own_bearing = None;
        self.peer_bearing = None;
        let obs = MutualObservation { bearing_b_to_a: bb, bearing_a_to_b: ba, range, rp_a, rp_b, t };
        let z = match raw_estimate(&obs) {
            Ok(z) => z,
            Err(e) => {
                log::debug!("raw pose at t={t}: {e}");
                self.stats.raw_failed += 1;
                return;
            }
        };
        self.stats.raw += 1;
        self.raw.push(StampedPose { t, pose: z.pose() });
        if s.mode < Estimator::Eskf {
            return;
        }
        let restart = match &self.filter {
            None => true,
            Some(f) => f.consecutive_rejections() > s.max_rejections || t - f.last_correction() > s.reinit_after,
        };
        if restart {
            if self.filter.is_some() {
                self.stats.reinits += 1;
            }
            self.filter = Some(RelativeEskf::new(&z, s.filter));
            self.set_inputs();
            return;
        }
        match self.filter.as_mut().expect("checked above").correct(&z) {
            Ok(()) => self.stats.corrections += 1,
            Err(EskfError::Rejected { .. }) => self.stats.rejected += 1,
            Err(e) => log::warn!("filter update at t={t}: {e}"),
        }
    }
}

struct RobotNode {
    id: RobotId,
    tracker: SpotTracker,
    history: VecDeque<OwnRecord>,
    pairs: BTreeMap<RobotId, PairState>,
    peer_estimates: BTreeMap<RobotId, Vec<RelativeEstimate>>,
    pgo: BTreeMap<RobotId, Vec<StampedPose>>,
}

const HISTORY_SECONDS: f64 = 2.0;

impl RobotNode {
    fn fresh_estimates(&self, stale_after: f64) -> Vec<RelativeEstimate> {
        self.pairs
            .values()
            .filter_map(|p| {
                let f = p.filter.as_ref()?;
                (f.state.t - f.last_correction() <= stale_after).then(|| {
                    let x = f.estimate();
                    RelativeEstimate {
                        observer: self.id,
                        target: p.target,
                        pose: Pose::from_quat(&x.q, x.p),
                        t: x.t,
                        weight: 1.0,
                    }
                })
            })
            .collect()
    }

    fn record(&self, tick: u64) -> Option<&OwnRecord> {
        let k = self.history.partition_point(|r| r.packet.tick < tick);
        self.history.get(k).filter(|r| r.packet.tick == tick)
    }
}

/// Counters for a whole run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub pairs: BTreeMap<(RobotId, RobotId), PairStats>,
    pub pgo_solves: usize,
    pub pgo_not_converged: usize,
}

/// Everything a run produced, in memory.
pub struct RunOutput {
    pub config: ScenarioConfig,
    /// Estimated pose of `target` in `observer`'s frame, keyed by
    /// `(estimator, observer, target)`.
    pub series: BTreeMap<(String, RobotId, RobotId), Vec<StampedPose>>,
    pub metrics: MetricsReport,
    pub stats: RunStats,
    trajectories: BTreeMap<RobotId, Trajectory>,
}

impl RunOutput {
    /// World pose of a robot.
    pub fn world_truth(&self, id: RobotId, t: f64) -> Result<Pose, SimError> {
        let tr = self.trajectories.get(&id).ok_or_else(|| SimError::InvalidConfig(format!("unknown robot {id}")))?;
        Ok(tr.eval(t)?.pose())
    }

    /// True pose of `target` in `observer`'s body frame.
    pub fn relative_truth(&self, observer: RobotId, target: RobotId, t: f64) -> Result<Pose, SimError> {
        Ok(self.world_truth(observer, t)?.inverse() * self.world_truth(target, t)?)
    }

    pub fn get(&self, estimator: &str, observer: RobotId, target: RobotId) -> Option<&[StampedPose]> {
        self.series.get(&(estimator.to_string(), observer, target)).map(Vec::as_slice)
    }

    /// Estimates matched with the truth at the same instants.
    pub fn pair(&self, estimator: &str, observer: RobotId, target: RobotId) -> Result<TrajectoryPair, PipelineError> {
        let est = self.get(estimator, observer, target).unwrap_or(&[]);
        let mut matched = Vec::with_capacity(est.len());
        for e in est {
            matched.push((e.t, e.pose, self.relative_truth(observer, target, e.t)?));
        }
        Ok(TrajectoryPair::from_matched(matched)?)
    }

    fn truth_times(&self) -> Vec<f64> {
        let step = CLOCK_HZ / self.config.rates.camera_hz;
        let last = (self.config.duration * CLOCK_HZ as f64).round() as u32;
        (0..=last).step_by(step as usize).map(|k| f64::from(k) / f64::from(CLOCK_HZ)).collect()
    }

    /// Writes estimate, truth and error CSVs, `metrics.json` and `manifest.txt`.
    ///
    /// Layout:
    /// - `estimates/<estimator>_<observer>_<target>.csv`: `t,x,y,z,qw,qx,qy,qz`
    /// - `errors/<estimator>_<observer>_<target>.csv`: `t,pos_err,rot_err_deg`
    /// - `truth/<observer>_<target>.csv`: true relative pose at every camera tick
    /// - `world/<robot>.csv`: world pose at every camera tick
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        for sub in ["estimates", "errors", "truth", "world"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        for ((est, o, t), poses) in &self.series {
            let name = format!("{est}_{o}_{t}.csv");
            write_pose_csv(BufWriter::new(File::create(dir.join("estimates").join(&name))?), poses)?;
            if let Ok(pair) = self.pair(est, *o, *t) {
                write_series_csv(BufWriter::new(File::create(dir.join("errors").join(&name))?), &error_series(&pair))?;
            }
        }
        self.write_truth(dir)?;
        std::fs::write(dir.join("metrics.json"), self.metrics.to_json()?)?;
        std::fs::write(dir.join("manifest.txt"), self.manifest())?;
        Ok(())
    }

    /// Ground-truth CSVs only.
    pub fn write_truth(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir.join("truth"))?;
        std::fs::create_dir_all(dir.join("world"))?;
        let times = self.truth_times();
        let ids = self.config.robot_ids();
        for &i in &ids {
            let world: Vec<StampedPose> = times
                .iter()
                .map(|&t| Ok(StampedPose { t, pose: self.world_truth(i, t)? }))
                .collect::<Result<_, SimError>>()?;
            write_pose_csv(BufWriter::new(File::create(dir.join("world").join(format!("{i}.csv")))?), &world)?;
            for &j in ids.iter().filter(|j| **j != i) {
                let rel: Vec<StampedPose> = times
                    .iter()
                    .map(|&t| Ok(StampedPose { t, pose: self.relative_truth(i, j, t)? }))
                    .collect::<Result<_, SimError>>()?;
                write_pose_csv(BufWriter::new(File::create(dir.join("truth").join(format!("{i}_{j}.csv")))?), &rel)?;
            }
        }
        Ok(())
    }

    /// `key = value` lines; no wall-clock data, so reruns are byte-identical.
    pub fn manifest(&self) -> String {
        let c = &self.config;
        let mut m = String::new();
        let _ = writeln!(m, "scenario = {}", c.name);
        let _ = writeln!(m, "seed = {}", c.seed);
        let _ = writeln!(m, "config_sha256 = {}", c.hash());
        let _ = writeln!(m, "schema_version = {}", crate::scenario::SCHEMA_VERSION);
        let _ = writeln!(m, "relpose_version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(m, "estimator = {}", c.estimator.name());
        let _ = writeln!(m, "duration_s = {}", c.duration);
        let _ = writeln!(m, "robots = {}", c.robots.len());
        for est in [RAW, ESKF, PGO] {
            if let Some(a) = self.metrics.mean_ate_pos(est) {
                let _ = writeln!(m, "mean_ate_pos_m.{est} = {a:.9e}");
            }
        }
        let _ = writeln!(m, "pgo_solves = {}", self.stats.pgo_solves);
        let _ = writeln!(m, "pgo_not_converged = {}", self.stats.pgo_not_converged);
        m
    }
}

/// Runs the scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, PipelineError> {
    let wc = cfg.world_config();
    let mut world = World::new(wc.clone())?;
    let ids = cfg.robot_ids();
    let led_to_robot: BTreeMap<u8, RobotId> = cfg.robots.iter().map(|r| (r.led_id, r.id)).collect();
    let mut filter = FilterConfig::from_densities(
        cfg.filter.accel_density * 1e-6 * crate::sim::GRAVITY,
        cfg.filter.gyro_density.to_radians(),
    );
    filter.meas = MeasurementNoise {
        pos_sigma_floor: cfg.filter.pos_sigma_floor,
        pos_sigma_per_meter: cfg.filter.pos_sigma_per_meter,
        rot_sigma: cfg.filter.rot_sigma_deg.to_radians(),
        shared_range_sigma: None,
    };
    filter.gate = (cfg.filter.gate > 0.0).then_some(cfg.filter.gate);
    let settings = Settings {
        mode: cfg.estimator,
        filter,
        bearing_tol: cfg.pairing.bearing_tolerance,
        range_max_age: cfg.pairing.range_max_age,
        rp_max_age: cfg.pairing.rp_max_age,
        max_rejections: cfg.filter.max_rejections,
        reinit_after: cfg.filter.reinit_after,
    };
    let mount = cfg.camera.mount.body_from_cam();
    let k = cfg.camera.intrinsics;
    let pgo_period = u64::from(CLOCK_HZ / cfg.pgo.rate_hz);
    let egos = cfg.pgo_egos();
    let kernel = if cfg.pgo.huber_delta > 0.0 { Kernel::Huber { delta: cfg.pgo.huber_delta } } else { Kernel::None };
    let solve_opts = SolveOptions { max_iters: cfg.pgo.max_iters, kernel: Some(kernel), ..SolveOptions::default() };
    let history_len = (HISTORY_SECONDS * CLOCK_HZ as f64) as u64;

    let mut nodes: Vec<RobotNode> = ids
        .iter()
        .map(|&id| RobotNode {
            id,
            tracker: SpotTracker::new(wc.library.clone(), cfg.pairing.track_gate_px),
            history: VecDeque::new(),
            pairs: ids.iter().filter(|j| **j != id).map(|&j| (j, PairState::new(j))).collect(),
            peer_estimates: BTreeMap::new(),
            pgo: BTreeMap::new(),
        })
        .collect();
    // bus seed is derived from the scenario seed so loss patterns are reproducible
    let mut bus: Bus<Packet> = Bus::new(&ids, cfg.bus.latency, cfg.bus.loss, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut stats = RunStats::default();

    while let Some(frame) = world.next_frame() {
        let SensorFrame { tick, t, robots } = frame;
        for (node, rf) in nodes.iter_mut().zip(&robots) {
            let rec = ingest(node, rf, tick, t, &mount, &k, &led_to_robot);
            bus.publish(node.id, t, Packet::Sensor(rec.packet.clone()));
            node.history.push_back(rec);
            while node.history.front().is_some_and(|r| r.packet.tick + history_len < tick) {
                node.history.pop_front();
            }
        }
        for node in nodes.iter_mut() {
            deliver(node, bus.poll(node.id, t), &settings);
        }
        if cfg.estimator >= Estimator::Pgo && tick % pgo_period == 0 {
            for node in &nodes {
                bus.publish(node.id, t, Packet::Estimates(node.fresh_estimates(cfg.pgo.stale_after)));
            }
            for node in nodes.iter_mut() {
                deliver(node, bus.poll(node.id, t), &settings);
                if !egos.contains(&node.id) {
                    continue;
                }
                let mut all = node.fresh_estimates(cfg.pgo.stale_after);
                all.extend(node.peer_estimates.values().flatten().copied());
                let graph = edges_from_filters(node.id, &all, cfg.pgo.window);
                if graph.nodes.is_empty() {
                    continue;
                }
                match solve(&graph, &solve_opts) {
                    Ok(sol) => {
                        stats.pgo_solves += 1;
                        if !sol.report.converged {
                            stats.pgo_not_converged += 1;
                        }
                        let t_sol = all.iter().map(|e| e.t).fold(f64::MIN, f64::max);
                        for (j, pose) in sol.poses.iter().filter(|(j, _)| **j != node.id) {
                            node.pgo.entry(*j).or_default().push(StampedPose { t: t_sol, pose: *pose });
                        }
                    }
                    Err(e) => log::warn!("robot {} PGO at t={t}: {e}", node.id),
                }
            }
        }
    }

    let mut series = BTreeMap::new();
    for node in nodes {
        for (j, p) in node.pairs {
            stats.pairs.insert((node.id, j), p.stats);
            series.insert((RAW.to_string(), node.id, j), p.raw);
            if cfg.estimator >= Estimator::Eskf {
                series.insert((ESKF.to_string(), node.id, j), p.eskf);
            }
        }
        for (j, p) in node.pgo {
            series.insert((PGO.to_string(), node.id, j), p);
        }
    }
    let trajectories = cfg
        .robots
        .iter()
        .map(|r| Ok((r.id, Trajectory::new(r.trajectory.clone())?)))
        .collect::<Result<_, SimError>>()?;
    let mut out = RunOutput {
        config: cfg.clone(),
        series,
        metrics: MetricsReport { scenario: cfg.name.clone(), seed: cfg.seed, pairs: Vec::new() },
        stats,
        trajectories,
    };
    let keys: Vec<_> = out.series.keys().cloned().collect();
    for (est, o, t) in keys {
        match out.pair(&est, o, t) {
            Ok(pair) => out.metrics.pairs.push(PairMetrics::from_pair(o, t, &est, &pair)),
            Err(PipelineError::Eval(EvalError::InsufficientOverlap(n))) => {
                log::info!("{est} {o}->{t}: only {n} samples, no metrics")
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Writes `world/`, `truth/` and the raw sensor streams under `sensors/`
/// without running any estimator.
pub fn export_ground_truth(cfg: &ScenarioConfig, dir: &Path) -> Result<(), PipelineError> {
    let trajectories = cfg
        .robots
        .iter()
        .map(|r| Ok((r.id, Trajectory::new(r.trajectory.clone())?)))
        .collect::<Result<_, SimError>>()?;
    let out = RunOutput {
        config: cfg.clone(),
        series: BTreeMap::new(),
        metrics: MetricsReport { scenario: cfg.name.clone(), seed: cfg.seed, pairs: Vec::new() },
        stats: RunStats::default(),
        trajectories,
    };
    out.write_truth(dir)?;
    let mut world = World::new(cfg.world_config())?;
    let frames: Vec<SensorFrame> = std::iter::from_fn(|| world.next_frame()).collect();
    crate::sim::write_sensor_csv(&dir.join("sensors"), &frames)?;
    Ok(())
}

fn ingest(
    node: &mut RobotNode,
    rf: &RobotFrame,
    tick: u64,
    t: f64,
    mount: &nalgebra::Rotation3<f64>,
    k: &crate::geom::DsIntrinsics,
    led_to_robot: &BTreeMap<u8, RobotId>,
) -> OwnRecord {
    let mut bearings = Vec::new();
    if let Some(dets) = &rf.detections {
        // the camera only reports spot positions; identities come from decoding
        let lit: Vec<Vector2<f64>> = dets.iter().filter(|d| d.lit).map(|d| d.pixel).collect();
        for spot in node.tracker.observe(t, &lit) {
            let Some(peer) = spot.id.and_then(|id| led_to_robot.get(&id)) else {
                continue;
            };
            if *peer == node.id || bearings.iter().any(|(p, _)| p == peer) {
                continue;
            }
            if let Ok(b) = ds_unproject(&spot.pixel, k) {
                bearings.push((*peer, mount * b));
            }
        }
    }
    OwnRecord { packet: SensorPacket { tick, t, imu: rf.imu, rp: rf.attitude_rp, bearings }, ranges: rf.uwb.clone() }
}

fn deliver(node: &mut RobotNode, packets: Vec<(RobotId, Packet)>, s: &Settings) {
    for (from, p) in packets {
        match p {
            Packet::Sensor(sp) => {
                let Some(own) = node.record(sp.tick).cloned() else {
                    log::debug!("robot {}: no own record for tick {}", node.id, sp.tick);
                    continue;
                };
                if let Some(pair) = node.pairs.get_mut(&from) {
                    pair.step(node.id, &own, &sp, s);
                }
            }
            Packet::Estimates(e) => {
                node.peer_estimates.insert(from, e);
            }
        }
    }
}
