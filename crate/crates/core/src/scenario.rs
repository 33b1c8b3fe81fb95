//! Scenario files.
//!
//! A scenario is a TOML document; see `scenarios/README.md` in the repository
//! for the full grammar. Every table except `[[robots]]` is optional.

use crate::codec::IdLibrary;
use crate::geom::DsIntrinsics;
use crate::sim::{
    CameraMount, NoiseParams, Obstacle, Rates, RobotId, RobotSpec, Trajectory, TrajectorySpec, WorldConfig, CLOCK_HZ,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), msg: msg.into() }
}

/// Cumulative estimator stages: each includes the ones before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Raw,
    Eskf,
    #[default]
    Pgo,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Raw => "raw",
            Estimator::Eskf => "eskf",
            Estimator::Pgo => "pgo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub id: RobotId,
    pub led_id: u8,
    #[serde(default)]
    pub led_phase: f64,
    pub trajectory: TrajectorySpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub intrinsics: DsIntrinsics,
    pub mount: CameraMount,
    /// Farthest distance at which a spot is still detected, m.
    pub max_range: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { intrinsics: DsIntrinsics::default(), mount: CameraMount::Forward, max_range: 50.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusConfig {
    pub latency: f64,
    pub loss: f64,
}

impl Default for BusConfig {
    fn default() -> Self {
        Self { latency: 0.0, loss: 0.0 }
    }
}

/// Raw-measurement assembly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    /// Largest time gap between the two bearings of one mutual observation, s.
    pub bearing_tolerance: f64,
    /// Oldest UWB range still paired with a bearing, s.
    pub range_max_age: f64,
    /// Oldest roll/pitch still paired with a bearing, s.
    pub rp_max_age: f64,
    /// Pixel gate of the spot tracker.
    pub track_gate_px: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self { bearing_tolerance: 0.01, range_max_age: 0.02, rp_max_age: 0.01, track_gate_px: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    /// Accelerometer noise density assumed by the filter, ug/sqrt(Hz).
    pub accel_density: f64,
    /// Gyroscope noise density assumed by the filter, deg/s/sqrt(Hz).
    pub gyro_density: f64,
    pub pos_sigma_floor: f64,
    pub pos_sigma_per_meter: f64,
    pub rot_sigma_deg: f64,
    /// Chi-square gate on the 9-dof innovation; 0 disables gating.
    pub gate: f64,
    /// Reinitialize from the next raw pose after this many rejections in a row.
    pub max_rejections: usize,
    /// Reinitialize when the last accepted correction is older than this, s.
    pub reinit_after: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            accel_density: 183.3,
            gyro_density: 0.021,
            pos_sigma_floor: 0.05,
            pos_sigma_per_meter: 0.02,
            rot_sigma_deg: 1.5,
            gate: crate::eskf::CHI2_9_P999,
            max_rejections: 20,
            reinit_after: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgoSettings {
    pub rate_hz: u32,
    /// Robots that solve a graph; empty means all.
    pub egos: Vec<RobotId>,
    /// Frame window for edges, s.
    pub window: f64,
    /// Filter estimates without a correction for this long are not used as edges, s.
    pub stale_after: f64,
    /// Huber threshold; 0 disables the robust kernel.
    pub huber_delta: f64,
    pub max_iters: usize,
}

impl Default for PgoSettings {
    fn default() -> Self {
        Self { rate_hz: 10, egos: Vec::new(), window: 0.01, stale_after: 0.2, huber_delta: 0.5, max_iters: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    pub duration: f64,
    /// Seeds all noise; overrides `noise.seed`.
    pub seed: u64,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub noise: NoiseParams,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub bus: BusConfig,
    #[serde(default)]
    pub pairing: PairingConfig,
    #[serde(default)]
    pub filter: FilterSettings,
    #[serde(default)]
    pub pgo: PgoSettings,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub robots: Vec<RobotConfig>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is always representable in TOML")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn robot_ids(&self) -> Vec<RobotId> {
        self.robots.iter().map(|r| r.id).collect()
    }

    pub fn pgo_egos(&self) -> Vec<RobotId> {
        if self.pgo.egos.is_empty() {
            self.robot_ids()
        } else {
            self.pgo.egos.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != SCHEMA_VERSION {
            return Err(invalid("version", format!("expected {SCHEMA_VERSION}, got {}", self.version)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(invalid("duration", "must be a positive number of seconds"));
        }
        if self.robots.len() < 2 {
            return Err(invalid("robots", "at least 2 robots are required"));
        }
        let mut ids = BTreeSet::new();
        let mut leds = BTreeSet::new();
        let lib = IdLibrary::default();
        for (k, r) in self.robots.iter().enumerate() {
            if !ids.insert(r.id) {
                return Err(invalid(format!("robots[{k}].id"), format!("duplicate id {}", r.id)));
            }
            if lib.duty_of(r.led_id).is_err() {
                return Err(invalid(format!("robots[{k}].led_id"), format!("{} is not in the LED library", r.led_id)));
            }
            if !leds.insert(r.led_id) {
                return Err(invalid(format!("robots[{k}].led_id"), format!("LED id {} already used", r.led_id)));
            }
            if !r.led_phase.is_finite() {
                return Err(invalid(format!("robots[{k}].led_phase"), "must be finite"));
            }
            if r.trajectory.duration < self.duration {
                return Err(invalid(format!("robots[{k}].trajectory.duration"), "shorter than the scenario duration"));
            }
            Trajectory::new(r.trajectory.clone())
                .map_err(|e| invalid(format!("robots[{k}].trajectory"), e.to_string()))?;
        }
        for (name, hz) in [
            ("rates.imu_hz", self.rates.imu_hz),
            ("rates.camera_hz", self.rates.camera_hz),
            ("rates.uwb_hz", self.rates.uwb_hz),
        ] {
            if hz == 0 || !CLOCK_HZ.is_multiple_of(hz) {
                return Err(invalid(name, format!("must be a positive divisor of {CLOCK_HZ}")));
            }
        }
        let n = &self.noise;
        for (name, v) in [
            ("noise.accel_density", n.accel_density),
            ("noise.gyro_density", n.gyro_density),
            ("noise.uwb_sigma", n.uwb_sigma),
            ("noise.pixel_sigma", n.pixel_sigma),
            ("noise.attitude_rp_sigma", n.attitude_rp_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be >= 0"));
            }
        }
        if matches!(n.attitude_rp_tau, Some(t) if !(t > 0.0)) {
            return Err(invalid("noise.attitude_rp_tau", "must be > 0"));
        }
        self.camera.intrinsics.validate().map_err(|e| invalid("camera", e.to_string()))?;
        if !(self.camera.max_range > 0.0) {
            return Err(invalid("camera.max_range", "must be > 0"));
        }
        if !(self.bus.latency >= 0.0) {
            return Err(invalid("bus.latency", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.bus.loss) {
            return Err(invalid("bus.loss", "must be in [0, 1]"));
        }
        let p = &self.pairing;
        for (name, v) in [
            ("pairing.bearing_tolerance", p.bearing_tolerance),
            ("pairing.range_max_age", p.range_max_age),
            ("pairing.rp_max_age", p.rp_max_age),
        ] {
            if !(v >= 0.0) {
                return Err(invalid(name, "must be >= 0"));
            }
        }
        if !(p.track_gate_px > 0.0) {
            return Err(invalid("pairing.track_gate_px", "must be > 0"));
        }
        let f = &self.filter;
        for (name, v) in [("filter.accel_density", f.accel_density), ("filter.gyro_density", f.gyro_density)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be >= 0"));
            }
        }
        for (name, v) in [
            ("filter.pos_sigma_floor", f.pos_sigma_floor),
            ("filter.rot_sigma_deg", f.rot_sigma_deg),
            ("filter.reinit_after", f.reinit_after),
        ] {
            if !(v > 0.0) {
                return Err(invalid(name, "must be > 0"));
            }
        }
        if !(f.pos_sigma_per_meter >= 0.0) {
            return Err(invalid("filter.pos_sigma_per_meter", "must be >= 0"));
        }
        if !(f.gate >= 0.0) {
            return Err(invalid("filter.gate", "must be >= 0"));
        }
        let g = &self.pgo;
        if g.rate_hz == 0 || !CLOCK_HZ.is_multiple_of(g.rate_hz) {
            return Err(invalid("pgo.rate_hz", format!("must be a positive divisor of {CLOCK_HZ}")));
        }
        if !self.rates.camera_hz.is_multiple_of(g.rate_hz) {
            return Err(invalid("pgo.rate_hz", "must divide rates.camera_hz"));
        }
        if let Some(e) = g.egos.iter().find(|e| !ids.contains(e)) {
            return Err(invalid("pgo.egos", format!("unknown robot {e}")));
        }
        for (name, v) in [("pgo.window", g.window), ("pgo.stale_after", g.stale_after)] {
            if !(v > 0.0) {
                return Err(invalid(name, "must be > 0"));
            }
        }
        if !(g.huber_delta >= 0.0) {
            return Err(invalid("pgo.huber_delta", "must be >= 0"));
        }
        if g.max_iters == 0 {
            return Err(invalid("pgo.max_iters", "must be > 0"));
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            o.validate().map_err(|e| invalid(format!("obstacles[{k}]"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            robots: self
                .robots
                .iter()
                .map(|r| RobotSpec {
                    id: r.id,
                    trajectory: r.trajectory.clone(),
                    led_id: r.led_id,
                    led_phase: r.led_phase,
                })
                .collect(),
            noise: NoiseParams { seed: self.seed, ..self.noise },
            camera: self.camera.intrinsics,
            mount: self.camera.mount,
            rates: self.rates,
            obstacles: self.obstacles.clone(),
            duration: self.duration,
            max_detection_range: self.camera.max_range,
            library: IdLibrary::default(),
        }
    }
}
