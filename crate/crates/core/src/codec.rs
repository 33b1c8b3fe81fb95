//! LED duty-cycle identity codec and frame-to-frame spot tracking.
//!
//! Every beacon blinks with a common period, starting its on-phase at the
//! period boundary. Its identity is the fraction of the period it is lit.
//! An observer associates spots across camera frames by pixel distance and
//! estimates each track's duty rate by counting lit frames over whole periods.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("invalid id library: {0}")]
    InvalidLibrary(String),
    #[error("id {0} is not in the library")]
    UnknownId(u8),
}

/// Why a track could not be mapped to an id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Undecided {
    TooShort { periods: usize },
    NoMatch { duty: f64 },
    Ambiguous { duty: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdEntry {
    pub id: u8,
    pub duty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdLibrary {
    /// Blink period in seconds.
    period: f64,
    entries: Vec<IdEntry>,
    duty_tolerance: f64,
    min_periods: usize,
}

impl Default for IdLibrary {
    fn default() -> Self {
        let entries = (1..=8).map(|k| IdEntry { id: (k - 1) as u8, duty: k as f64 / 10.0 }).collect();
        Self::new(50.0, entries, 0.04).expect("default library is valid")
    }
}

impl IdLibrary {
    pub fn new(period_ms: f64, entries: Vec<IdEntry>, duty_tolerance: f64) -> Result<Self, CodecError> {
        if !(period_ms > 0.0) {
            return Err(CodecError::InvalidLibrary("period must be positive".into()));
        }
        if !(duty_tolerance >= 0.0) {
            return Err(CodecError::InvalidLibrary("tolerance must be non-negative".into()));
        }
        for e in &entries {
            if !(e.duty > 0.0 && e.duty < 1.0) {
                return Err(CodecError::InvalidLibrary(format!("duty {} of id {} is outside (0, 1)", e.duty, e.id)));
            }
        }
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                if a.id == b.id {
                    return Err(CodecError::InvalidLibrary(format!("duplicate id {}", a.id)));
                }
                if (a.duty - b.duty).abs() <= 2.0 * duty_tolerance {
                    return Err(CodecError::InvalidLibrary(format!(
                        "ids {} and {} are closer than twice the tolerance",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(Self { period: period_ms / 1000.0, entries, duty_tolerance, min_periods: 3 })
    }

    pub fn with_min_periods(mut self, min_periods: usize) -> Self {
        self.min_periods = min_periods.max(1);
        self
    }

    /// Period in seconds.
    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn entries(&self) -> &[IdEntry] {
        &self.entries
    }

    pub fn duty_tolerance(&self) -> f64 {
        self.duty_tolerance
    }

    pub fn min_periods(&self) -> usize {
        self.min_periods
    }

    pub fn duty_of(&self, id: u8) -> Result<f64, CodecError> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.duty).ok_or(CodecError::UnknownId(id))
    }

    /// Closed-form view of one beacon's schedule.
    pub fn schedule(&self, id: u8) -> Result<LedSchedule, CodecError> {
        Ok(LedSchedule { period: self.period, duty: self.duty_of(id)? })
    }
}

/// Timestamps this close (seconds) to an edge count as after it.
const EDGE_EPS: f64 = 1e-9;

/// Periodic on/off pattern, on during `[k P, k P + duty P)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedSchedule {
    pub period: f64,
    pub duty: f64,
}

impl LedSchedule {
    pub fn is_lit(&self, t: f64) -> bool {
        let x = t / self.period;
        let eps = EDGE_EPS / self.period;
        let phase = x - (x + eps).floor();
        phase < self.duty - eps
    }
}

/// On-intervals `(t_on, t_off)` in seconds covering `[0, horizon)`.
pub fn encode_schedule(id: u8, lib: &IdLibrary, horizon: f64) -> Result<Vec<(f64, f64)>, CodecError> {
    let duty = lib.duty_of(id)?;
    let period = lib.period;
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let start = k as f64 * period;
        if start >= horizon {
            break;
        }
        out.push((start, (start + duty * period).min(horizon)));
        k += 1;
    }
    Ok(out)
}

/// `lit[k]` is true iff `camera_times[k]` falls inside an on-interval.
pub fn sample_schedule(schedule: &[(f64, f64)], camera_times: &[f64]) -> Vec<bool> {
    let mut idx = 0;
    camera_times
        .iter()
        .map(|&t| {
            // boundary samples within EDGE_EPS take the state that follows the edge
            while idx < schedule.len() && schedule[idx].1 - EDGE_EPS <= t {
                idx += 1;
            }
            idx < schedule.len() && schedule[idx].0 - EDGE_EPS <= t && t < schedule[idx].1 - EDGE_EPS
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotSample {
    pub t: f64,
    pub pixel: Vector2<f64>,
    pub lit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotTrack {
    pub track_id: u64,
    pub samples: Vec<SpotSample>,
    pub decoded_id: Option<u8>,
}

impl SpotTrack {
    pub fn new(track_id: u64) -> Self {
        Self { track_id, samples: Vec::new(), decoded_id: None }
    }

    pub fn last_pixel(&self) -> Option<Vector2<f64>> {
        self.samples.last().map(|s| s.pixel)
    }

    fn last_lit_time(&self) -> Option<f64> {
        self.samples.iter().rev().find(|s| s.lit).map(|s| s.t)
    }
}

/// Duty rate from lit-sample counts over the trailing whole periods of a
/// track, mapped to the unique library entry within tolerance.
pub fn decode_id(track: &SpotTrack, lib: &IdLibrary) -> Result<u8, Undecided> {
    let s = &track.samples;
    if s.len() < 2 {
        return Err(Undecided::TooShort { periods: 0 });
    }
    let t_last = s[s.len() - 1].t;
    let dt = (t_last - s[0].t) / (s.len() - 1) as f64;
    let covered = dt * s.len() as f64;
    let periods = (covered / lib.period + 1e-6).floor() as usize;
    if periods < lib.min_periods {
        return Err(Undecided::TooShort { periods });
    }
    let window_start = t_last - periods as f64 * lib.period + 0.5 * dt;
    let (mut lit, mut total) = (0usize, 0usize);
    for sample in s.iter().rev().take_while(|x| x.t > window_start) {
        total += 1;
        lit += sample.lit as usize;
    }
    let duty = lit as f64 / total as f64;
    let mut matches = lib.entries.iter().filter(|e| (e.duty - duty).abs() <= lib.duty_tolerance + 1e-12);
    match (matches.next(), matches.next()) {
        (Some(e), None) => Ok(e.id),
        (None, _) => Err(Undecided::NoMatch { duty }),
        (Some(_), Some(_)) => Err(Undecided::Ambiguous { duty }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Association {
    Track(u64),
    New,
}

/// Greedy nearest-neighbour matching of current spots to previous tracks
/// under a pixel gate. One-to-one; the result follows the order of `curr`.
pub fn associate_spots(
    prev: &[(u64, Vector2<f64>)],
    curr: &[Vector2<f64>],
    gate: f64,
) -> Vec<(Association, Vector2<f64>)> {
    let mut pairs: Vec<(f64, u64, usize)> = Vec::new();
    for &(track, p) in prev {
        for (ci, c) in curr.iter().enumerate() {
            let d = (c - p).norm();
            if d <= gate {
                pairs.push((d, track, ci));
            }
        }
    }
    // ties broken on track id, then pixel coordinates, so the outcome does not
    // depend on the order detections were listed in
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then_with(|| cmp_pixel(&curr[a.2], &curr[b.2])));
    let mut used_track = Vec::new();
    let mut assigned: Vec<Association> = vec![Association::New; curr.len()];
    let mut taken = vec![false; curr.len()];
    for (_, track, ci) in pairs {
        if taken[ci] || used_track.contains(&track) {
            continue;
        }
        taken[ci] = true;
        used_track.push(track);
        assigned[ci] = Association::Track(track);
    }
    assigned.into_iter().zip(curr.iter().copied()).collect()
}

fn cmp_pixel(a: &Vector2<f64>, b: &Vector2<f64>) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// A spot seen in the current frame together with its track's identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedSpot {
    pub track_id: u64,
    pub id: Option<u8>,
    pub pixel: Vector2<f64>,
}

/// Per-observer tracker: feeds every camera frame's lit spots through
/// [`associate_spots`] and records lit/unlit samples per track.
#[derive(Debug, Clone)]
pub struct SpotTracker {
    lib: IdLibrary,
    gate: f64,
    /// Tracks unseen for longer than this many seconds are dropped.
    max_gap: f64,
    /// Samples older than this many periods are discarded.
    keep_periods: usize,
    tracks: Vec<SpotTrack>,
    next_id: u64,
}

impl SpotTracker {
    pub fn new(lib: IdLibrary, gate: f64) -> Self {
        let max_gap = 2.0 * lib.period;
        let keep_periods = lib.min_periods + 2;
        Self { lib, gate, max_gap, keep_periods, tracks: Vec::new(), next_id: 0 }
    }

    pub fn tracks(&self) -> &[SpotTrack] {
        &self.tracks
    }

    pub fn library(&self) -> &IdLibrary {
        &self.lib
    }

    pub fn observe(&mut self, t: f64, lit_pixels: &[Vector2<f64>]) -> Vec<TrackedSpot> {
        let prev: Vec<(u64, Vector2<f64>)> =
            self.tracks.iter().filter_map(|tr| tr.last_pixel().map(|p| (tr.track_id, p))).collect();
        let assoc = associate_spots(&prev, lit_pixels, self.gate);

        let mut seen = Vec::with_capacity(assoc.len());
        for (a, pixel) in assoc {
            let idx = match a {
                Association::Track(id) => {
                    self.tracks.iter().position(|tr| tr.track_id == id).expect("associated track exists")
                }
                Association::New => {
                    self.tracks.push(SpotTrack::new(self.next_id));
                    self.next_id += 1;
                    self.tracks.len() - 1
                }
            };
            self.tracks[idx].samples.push(SpotSample { t, pixel, lit: true });
            seen.push(idx);
        }
        for (idx, tr) in self.tracks.iter_mut().enumerate() {
            if !seen.contains(&idx) {
                if let Some(pixel) = tr.last_pixel() {
                    tr.samples.push(SpotSample { t, pixel, lit: false });
                }
            }
        }

        let horizon = self.keep_periods as f64 * self.lib.period;
        let max_gap = self.max_gap;
        self.tracks.retain(|tr| tr.last_lit_time().is_some_and(|lt| t - lt <= max_gap));
        for tr in &mut self.tracks {
            let cut = tr.samples.partition_point(|s| s.t < t - horizon);
            if cut > 0 {
                tr.samples.drain(..cut);
            }
            if let Ok(id) = decode_id(tr, &self.lib) {
                tr.decoded_id = Some(id);
            }
        }

        let mut out: Vec<TrackedSpot> = self
            .tracks
            .iter()
            .filter(|tr| tr.samples.last().is_some_and(|s| s.lit && s.t == t))
            .map(|tr| TrackedSpot { track_id: tr.track_id, id: tr.decoded_id, pixel: tr.samples.last().unwrap().pixel })
            .collect();
        out.sort_by_key(|s| s.track_id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lib_two() -> IdLibrary {
        IdLibrary::new(50.0, vec![IdEntry { id: 3, duty: 0.3 }, IdEntry { id: 6, duty: 0.6 }], 0.1).unwrap()
    }

    fn camera_times(rate: f64, start: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| start + k as f64 / rate).collect()
    }

    fn track_from(times: &[f64], lit: &[bool]) -> SpotTrack {
        SpotTrack {
            track_id: 0,
            samples: times.iter().zip(lit).map(|(&t, &l)| SpotSample { t, pixel: Vector2::zeros(), lit: l }).collect(),
            decoded_id: None,
        }
    }

    #[test]
    fn half_duty_schedule() {
        let lib = IdLibrary::new(50.0, vec![IdEntry { id: 1, duty: 0.5 }], 0.1).unwrap();
        let s = encode_schedule(1, &lib, 0.1).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0].0 - 0.0).abs() < 1e-12 && (s[0].1 - 0.025).abs() < 1e-12);
        assert!((s[1].0 - 0.05).abs() < 1e-12 && (s[1].1 - 0.075).abs() < 1e-12);
        assert_eq!(sample_schedule(&s, &[0.010, 0.030]), vec![true, false]);
        assert_eq!(encode_schedule(9, &lib, 0.1), Err(CodecError::UnknownId(9)));
    }

    #[test]
    fn library_rejects_bad_duties() {
        let full = IdLibrary::new(50.0, vec![IdEntry { id: 0, duty: 1.0 }], 0.04);
        assert!(matches!(full, Err(CodecError::InvalidLibrary(_))));
        let close = IdLibrary::new(50.0, vec![IdEntry { id: 0, duty: 0.3 }, IdEntry { id: 1, duty: 0.35 }], 0.04);
        assert!(close.is_err());
        assert!(IdLibrary::new(0.0, vec![], 0.04).is_err());
    }

    #[test]
    fn sampled_duty_within_one_sample() {
        // counting argument: n samples per period resolve the duty to 1/n
        let lib = IdLibrary::default();
        for e in lib.entries() {
            let s = encode_schedule(e.id, &lib, 0.5).unwrap();
            let times = camera_times(200.0, 0.0013, 100);
            let lit = sample_schedule(&s, &times);
            let duty = lit.iter().filter(|&&l| l).count() as f64 / lit.len() as f64;
            assert!((duty - e.duty).abs() <= 1.0 / 10.0 + 1e-12);
        }
    }

    #[test]
    fn closed_form_schedule_matches_intervals() {
        let lib = IdLibrary::default();
        let times = camera_times(200.0, 0.0, 400);
        for e in lib.entries() {
            let s = encode_schedule(e.id, &lib, 2.0).unwrap();
            let sched = lib.schedule(e.id).unwrap();
            let a = sample_schedule(&s, &times);
            let b: Vec<bool> = times.iter().map(|&t| sched.is_lit(t)).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn decode_perfect_track() {
        let lib = lib_two();
        let sched = encode_schedule(3, &lib, 0.2).unwrap();
        let times = camera_times(200.0, 0.0, 40);
        let track = track_from(&times, &sample_schedule(&sched, &times));
        assert_eq!(decode_id(&track, &lib), Ok(3));
    }

    #[test]
    fn decode_rejects_in_between_duty() {
        let lib = lib_two();
        let times = camera_times(200.0, 0.0, 40);
        // 0.45 duty: lit for the first 4.5 of every 10 samples alternating 4 and 5
        let lit: Vec<bool> = (0..40)
            .map(|k| {
                let slot = k % 10;
                let period = k / 10;
                slot < if period % 2 == 0 { 4 } else { 5 }
            })
            .collect();
        let track = track_from(&times, &lit);
        match decode_id(&track, &lib) {
            Err(Undecided::NoMatch { duty }) => assert!((duty - 0.45).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decode_needs_three_periods() {
        let lib = IdLibrary::default();
        let sched = encode_schedule(2, &lib, 0.2).unwrap();
        let times = camera_times(200.0, 0.0, 25);
        let track = track_from(&times, &sample_schedule(&sched, &times));
        assert_eq!(decode_id(&track, &lib), Err(Undecided::TooShort { periods: 2 }));
    }

    #[test]
    fn one_flip_over_the_window_still_decodes() {
        // 1 wrong sample in 30 moves the duty by 1/30 < 0.04
        let lib = IdLibrary::default();
        for e in lib.entries() {
            let sched = encode_schedule(e.id, &lib, 0.2).unwrap();
            let times = camera_times(200.0, 0.0021, 30);
            let mut lit = sample_schedule(&sched, &times);
            lit[17] = !lit[17];
            let track = track_from(&times, &lit);
            assert_eq!(decode_id(&track, &lib), Ok(e.id));
        }
    }

    #[test]
    fn association_gate() {
        let prev = vec![(4u64, Vector2::new(100.0, 100.0))];
        let moved = associate_spots(&prev, &[Vector2::new(102.0, 100.0)], 20.0);
        assert_eq!(moved[0].0, Association::Track(4));
        let jumped = associate_spots(&prev, &[Vector2::new(150.0, 100.0)], 20.0);
        assert_eq!(jumped[0].0, Association::New);
    }

    #[test]
    fn crossing_spots_keep_identity() {
        // two spots approach on parallel lines 30 px apart and pass each other
        let mut tracker = SpotTracker::new(IdLibrary::default(), 25.0);
        let mut first_ids = None;
        for k in 0..60 {
            let t = k as f64 * 0.005;
            let a = Vector2::new(100.0 + 3.0 * k as f64, 200.0);
            let b = Vector2::new(280.0 - 3.0 * k as f64, 230.0);
            let spots = tracker.observe(t, &[a, b]);
            let ids: Vec<(u64, f64)> = spots.iter().map(|s| (s.track_id, s.pixel.y)).collect();
            match &first_ids {
                None => first_ids = Some(ids),
                Some(f) => assert_eq!(&ids, f),
            }
        }
    }

    #[test]
    fn tracker_decodes_blinking_beacons() {
        let lib = IdLibrary::default();
        let mut tracker = SpotTracker::new(lib.clone(), 25.0);
        let scheds: Vec<_> = [1u8, 6].iter().map(|&id| lib.schedule(id).unwrap()).collect();
        let pos = [Vector2::new(100.0, 100.0), Vector2::new(400.0, 300.0)];
        let mut last = Vec::new();
        for k in 0..80 {
            let t = k as f64 * 0.005;
            let lit: Vec<_> = (0..2).filter(|&i| scheds[i].is_lit(t)).map(|i| pos[i]).collect();
            let out = tracker.observe(t, &lit);
            if !out.is_empty() {
                last = out;
            }
        }
        assert!(last.iter().all(|s| s.id.is_some()));
        let mut decoded: Vec<(f64, u8)> =
            tracker.tracks().iter().map(|tr| (tr.last_pixel().unwrap().x, tr.decoded_id.unwrap())).collect();
        decoded.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(decoded.iter().map(|d| d.1).collect::<Vec<_>>(), vec![1, 6]);
    }

    proptest! {
        #[test]
        fn association_is_permutation_invariant(
            pts in proptest::collection::vec((0.0f64..200.0, 0.0f64..200.0), 1..8),
            prev_pts in proptest::collection::vec((0.0f64..200.0, 0.0f64..200.0), 0..8),
            rot in 0usize..8,
        ) {
            let curr: Vec<_> = pts.iter().map(|&(x, y)| Vector2::new(x, y)).collect();
            let prev: Vec<_> = prev_pts.iter().enumerate()
                .map(|(i, &(x, y))| (i as u64, Vector2::new(x, y))).collect();
            let mut shuffled = curr.clone();
            shuffled.rotate_left(rot % curr.len());
            shuffled.reverse();
            let mut a = associate_spots(&prev, &curr, 30.0);
            let mut b = associate_spots(&prev, &shuffled, 30.0);
            let key = |x: &(Association, Vector2<f64>)| (x.1.x, x.1.y);
            a.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
            b.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn round_trip_any_phase(id in 0u8..8, phase in 0.0f64..0.05, rate_mult in 1usize..6) {
            // rates that are integer multiples of 4 samples per period
            let lib = IdLibrary::default();
            let rate = 80.0 * rate_mult as f64 * 2.5;
            let sched = encode_schedule(id, &lib, 1.0).unwrap();
            let n = (0.5 * rate) as usize;
            let times = camera_times(rate, phase, n);
            let track = track_from(&times, &sample_schedule(&sched, &times));
            prop_assert_eq!(decode_id(&track, &lib), Ok(id));
        }
    }
}
