//! Closed route geometry and fixed-time signal controllers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::PathHeading;
use crate::messages::{validate_cycle, MessageError, Phase, PhaseSpan, SignalId, SpatMessage};

#[derive(Debug, Error, PartialEq)]
pub enum RouteError {
    #[error("unknown signal {0}")]
    UnknownSignal(SignalId),
    #[error("route needs at least 3 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoint arc positions must be strictly increasing (index {0})")]
    NonMonotonicArc(usize),
    #[error("route length must be positive, got {0}")]
    BadLength(f64),
    #[error("corridors must partition [0, {length}): {reason}")]
    BadCorridors { length: f64, reason: String },
    #[error("signal {id} at {arc_s} lies outside [0, {length})")]
    SignalOffRoute { id: SignalId, arc_s: f64, length: f64 },
    #[error("signal {id}: offset {offset} outside [0, {period})")]
    BadOffset { id: SignalId, offset: f64, period: f64 },
    #[error(transparent)]
    Cycle(#[from] MessageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub arc_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub name: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSite {
    pub signal_id: SignalId,
    pub arc_s: f64,
}

/// Closest point on the route to a query position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub arc_s: f64,
    /// Signed lateral offset, positive to the left of travel.
    pub cte: f64,
    pub path_heading: f64,
}

/// A closed polyline route with stop lines and named corridors.
#[derive(Debug, Clone)]
pub struct Route {
    length: f64,
    waypoints: Vec<Waypoint>,
    corridors: Vec<Corridor>,
    signals: Vec<SignalSite>,
    // unwrapped heading of segment i (waypoint i -> i+1), and its midpoint arc
    seg_heading: Vec<f64>,
    seg_mid: Vec<f64>,
    total_turn: f64,
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

impl Route {
    /// Builds a route from waypoints whose `arc_s` values increase strictly
    /// and stay below `length`; the last waypoint connects back to the first.
    pub fn new(
        length: f64,
        waypoints: Vec<Waypoint>,
        corridors: Vec<Corridor>,
        signals: Vec<SignalSite>,
    ) -> Result<Self, RouteError> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(RouteError::BadLength(length));
        }
        let n = waypoints.len();
        if n < 3 {
            return Err(RouteError::TooFewWaypoints(n));
        }
        if waypoints[0].arc_s != 0.0 {
            return Err(RouteError::NonMonotonicArc(0));
        }
        for i in 1..n {
            if !(waypoints[i].arc_s > waypoints[i - 1].arc_s) {
                return Err(RouteError::NonMonotonicArc(i));
            }
        }
        if !(waypoints[n - 1].arc_s < length) {
            return Err(RouteError::NonMonotonicArc(n - 1));
        }
        check_corridors(length, &corridors)?;
        for s in &signals {
            if !(0.0..length).contains(&s.arc_s) {
                return Err(RouteError::SignalOffRoute {
                    id: s.signal_id,
                    arc_s: s.arc_s,
                    length,
                });
            }
        }

        let mut seg_heading = Vec::with_capacity(n);
        let mut seg_mid = Vec::with_capacity(n);
        let mut prev_raw = None;
        for i in 0..n {
            let a = waypoints[i];
            let b = waypoints[(i + 1) % n];
            let raw = (b.y - a.y).atan2(b.x - a.x);
            let h = match (prev_raw, seg_heading.last()) {
                (Some(p), Some(&last)) => last + wrap_angle(raw - p),
                _ => raw,
            };
            prev_raw = Some(raw);
            seg_heading.push(h);
            let end = if i + 1 == n { length } else { b.arc_s };
            seg_mid.push(0.5 * (a.arc_s + end));
        }
        let closing = wrap_angle(seg_heading[0] - prev_raw.unwrap_or(0.0));
        let total_turn = seg_heading[n - 1] + closing - seg_heading[0];

        Ok(Self {
            length,
            waypoints,
            corridors,
            signals,
            seg_heading,
            seg_mid,
            total_turn,
        })
    }

    /// Counter-clockwise circle of circumference `length`, starting at the
    /// bottom and heading along +x, with roughly `spacing` metres between
    /// waypoints.
    pub fn circle(
        length: f64,
        spacing: f64,
        corridors: Vec<Corridor>,
        signals: Vec<SignalSite>,
    ) -> Result<Self, RouteError> {
        if !(length > 0.0) {
            return Err(RouteError::BadLength(length));
        }
        let count = ((length / spacing).round() as usize).max(3);
        let radius = length / (2.0 * PI);
        let step = length / count as f64;
        let waypoints = (0..count)
            .map(|k| {
                let theta = 2.0 * PI * k as f64 / count as f64 - PI / 2.0;
                Waypoint {
                    x: radius * theta.cos(),
                    y: radius * theta.sin(),
                    arc_s: k as f64 * step,
                }
            })
            .collect();
        Self::new(length, waypoints, corridors, signals)
    }

    /// The 800 m ring with three signals and corridors 3/1/2/3.
    pub fn default_ring() -> Self {
        Self::circle(800.0, 1.0, default_corridors(), default_signal_sites()).expect("default ring is valid")
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn corridors(&self) -> &[Corridor] {
        &self.corridors
    }

    pub fn signals(&self) -> &[SignalSite] {
        &self.signals
    }

    pub fn wrap_s(&self, s: f64) -> f64 {
        let w = s.rem_euclid(self.length);
        if w >= self.length {
            0.0
        } else {
            w
        }
    }

    fn segment_end(&self, i: usize) -> f64 {
        if i + 1 == self.waypoints.len() {
            self.length
        } else {
            self.waypoints[i + 1].arc_s
        }
    }

    fn segment_of(&self, s: f64) -> usize {
        let s = self.wrap_s(s);
        match self
            .waypoints
            .binary_search_by(|w| w.arc_s.partial_cmp(&s).expect("finite arc"))
        {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Point on the route at arc `s`, shifted `offset` metres to the left.
    pub fn point_at(&self, s: f64, offset: f64) -> (f64, f64) {
        let i = self.segment_of(s);
        let a = self.waypoints[i];
        let b = self.waypoints[(i + 1) % self.waypoints.len()];
        let s0 = a.arc_s;
        let s1 = self.segment_end(i);
        let t = (self.wrap_s(s) - s0) / (s1 - s0);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let norm = dx.hypot(dy);
        let (nx, ny) = (-dy / norm, dx / norm);
        (a.x + t * dx + offset * nx, a.y + t * dy + offset * ny)
    }

    /// Nearest route point to `(x, y)` by exhaustive segment search.
    pub fn project(&self, x: f64, y: f64) -> Projection {
        let n = self.waypoints.len();
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        for i in 0..n {
            let a = self.waypoints[i];
            let b = self.waypoints[(i + 1) % n];
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let t = (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0);
            let (fx, fy) = (a.x + t * dx, a.y + t * dy);
            let d2 = (x - fx).powi(2) + (y - fy).powi(2);
            if d2 < best.0 {
                best = (d2, i, t);
            }
        }
        let (_, i, t) = best;
        let a = self.waypoints[i];
        let b = self.waypoints[(i + 1) % n];
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let (fx, fy) = (a.x + t * dx, a.y + t * dy);
        let norm = dx.hypot(dy);
        let cte = (dx * (y - fy) - dy * (x - fx)) / norm;
        let arc_s = self.wrap_s(a.arc_s + t * (self.segment_end(i) - a.arc_s));
        Projection {
            arc_s,
            cte,
            path_heading: wrap_angle(self.heading(arc_s)),
        }
    }

    pub fn signal(&self, id: SignalId) -> Result<&SignalSite, RouteError> {
        self.signals
            .iter()
            .find(|s| s.signal_id == id)
            .ok_or(RouteError::UnknownSignal(id))
    }

    /// Forward distance from `arc_s` to the stop line of `id`, in `[0, length)`.
    pub fn distance_to_signal(&self, arc_s: f64, id: SignalId) -> Result<f64, RouteError> {
        let site = self.signal(id)?;
        Ok(self.wrap_s(site.arc_s - arc_s))
    }

    /// The first stop line ahead of `arc_s` and its distance.
    pub fn next_signal(&self, arc_s: f64) -> Option<(SignalSite, f64)> {
        self.signals
            .iter()
            .map(|s| (*s, self.wrap_s(s.arc_s - arc_s)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn corridor_at(&self, arc_s: f64) -> Option<&Corridor> {
        let s = self.wrap_s(arc_s);
        self.corridors.iter().find(|c| s >= c.start_s && s < c.end_s)
    }

    fn heading_segment(&self, s: f64) -> (usize, usize, f64) {
        // interpolation interval [mid_i, mid_{i+1}) containing s (wrapped)
        let n = self.seg_mid.len();
        let s = self.wrap_s(s);
        let i = self.segment_of(s);
        if s >= self.seg_mid[i] {
            (i, (i + 1) % n, s - self.seg_mid[i])
        } else {
            let p = (i + n - 1) % n;
            let back = if i == 0 { self.length } else { 0.0 };
            (p, i, s + back - self.seg_mid[p])
        }
    }

    fn heading_pair(&self, i: usize, j: usize) -> (f64, f64, f64) {
        let n = self.seg_mid.len();
        let (hi, mi) = (self.seg_heading[i], self.seg_mid[i]);
        let (mut hj, mut mj) = (self.seg_heading[j], self.seg_mid[j]);
        if j == 0 && i == n - 1 {
            hj += self.total_turn;
            mj += self.length;
        }
        (hi, hj, mj - mi)
    }
}

impl PathHeading for Route {
    fn heading(&self, s: f64) -> f64 {
        let laps = (s / self.length).floor();
        let (i, j, along) = self.heading_segment(s);
        let (hi, hj, span) = self.heading_pair(i, j);
        // segments before the wrap carry one lap less turning
        let lap_fix = if j == 0 && i == self.seg_mid.len() - 1 && self.wrap_s(s) < self.seg_mid[0] {
            -self.total_turn
        } else {
            0.0
        };
        hi + (hj - hi) * along / span + lap_fix + laps * self.total_turn
    }

    fn heading_rate(&self, s: f64) -> f64 {
        let (i, j, _) = self.heading_segment(s);
        let (hi, hj, span) = self.heading_pair(i, j);
        (hj - hi) / span
    }

    fn wrap_arc(&self, s: f64) -> f64 {
        self.wrap_s(s)
    }
}

fn check_corridors(length: f64, corridors: &[Corridor]) -> Result<(), RouteError> {
    if corridors.is_empty() {
        return Ok(());
    }
    let bad = |reason: String| RouteError::BadCorridors { length, reason };
    if corridors[0].start_s != 0.0 {
        return Err(bad(format!("first corridor starts at {}", corridors[0].start_s)));
    }
    for w in corridors.windows(2) {
        if (w[0].end_s - w[1].start_s).abs() > 1e-9 {
            return Err(bad(format!("gap or overlap between {} and {}", w[0].name, w[1].name)));
        }
    }
    for c in corridors {
        if !(c.end_s > c.start_s) {
            return Err(bad(format!("{} is empty", c.name)));
        }
    }
    let last = corridors.last().expect("nonempty");
    if (last.end_s - length).abs() > 1e-9 {
        return Err(bad(format!("last corridor ends at {}", last.end_s)));
    }
    Ok(())
}

pub fn default_corridors() -> Vec<Corridor> {
    let c = |name: &str, a: f64, b: f64| Corridor {
        name: name.to_string(),
        start_s: a,
        end_s: b,
    };
    vec![
        c("corridor-3", 0.0, 220.0),
        c("corridor-1", 220.0, 420.0),
        c("corridor-2", 420.0, 580.0),
        c("corridor-3", 580.0, 800.0),
    ]
}

pub fn default_signal_sites() -> Vec<SignalSite> {
    [(0, 220.0), (1, 420.0), (2, 580.0)]
        .into_iter()
        .map(|(id, s)| SignalSite {
            signal_id: SignalId(id),
            arc_s: s,
        })
        .collect()
}

pub fn default_cycle() -> Vec<PhaseSpan> {
    vec![
        PhaseSpan::new(Phase::Green, 15.0),
        PhaseSpan::new(Phase::Amber, 3.0),
        PhaseSpan::new(Phase::Red, 20.0),
    ]
}

/// Fixed-time controller; the cycle begins at `t = phase_offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalController {
    pub signal_id: SignalId,
    pub cycle_plan: Vec<PhaseSpan>,
    pub phase_offset: f64,
}

impl SignalController {
    pub fn new(signal_id: SignalId, cycle_plan: Vec<PhaseSpan>, phase_offset: f64) -> Result<Self, RouteError> {
        let c = Self {
            signal_id,
            cycle_plan,
            phase_offset,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), RouteError> {
        validate_cycle(&self.cycle_plan)?;
        let period = self.period();
        if !(0.0..period).contains(&self.phase_offset) {
            return Err(RouteError::BadOffset {
                id: self.signal_id,
                offset: self.phase_offset,
                period,
            });
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        self.cycle_plan.iter().map(|s| s.duration).sum()
    }

    /// Phase shown at time `t` and the time left in it.
    pub fn phase_at(&self, t: f64) -> (Phase, f64) {
        let mut pos = (t - self.phase_offset).rem_euclid(self.period());
        for span in &self.cycle_plan {
            if pos < span.duration {
                return (span.phase, span.duration - pos);
            }
            pos -= span.duration;
        }
        // pos landed on the period boundary through rounding
        let first = self.cycle_plan[0];
        (first.phase, first.duration)
    }

    pub fn spat(&self, t: f64) -> SpatMessage {
        let (phase, phase_remaining) = self.phase_at(t);
        SpatMessage {
            signal_id: self.signal_id,
            phase,
            phase_remaining,
            cycle_plan: self.cycle_plan.clone(),
            timestamp: t,
        }
    }
}

pub fn default_controllers() -> Vec<SignalController> {
    [0.0, 12.0, 24.0]
        .into_iter()
        .enumerate()
        .map(|(i, offset)| SignalController {
            signal_id: SignalId(i as u32),
            cycle_plan: default_cycle(),
            phase_offset: offset,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctrl() -> SignalController {
        SignalController::new(SignalId(0), default_cycle(), 0.0).unwrap()
    }

    #[test]
    fn phase_examples() {
        assert_eq!(ctrl().phase_at(0.0), (Phase::Green, 15.0));
        assert_eq!(ctrl().phase_at(16.0), (Phase::Amber, 2.0));
        assert_eq!(ctrl().phase_at(38.0), (Phase::Green, 15.0));
    }

    #[test]
    fn offset_shifts_cycle_start() {
        let c = SignalController::new(SignalId(1), default_cycle(), 12.0).unwrap();
        // 26 s into the cycle at t = 0
        let (p, r) = c.phase_at(0.0);
        assert_eq!(p, Phase::Red);
        assert!((r - 12.0).abs() < 1e-12);
        assert!(SignalController::new(SignalId(1), default_cycle(), 38.0).is_err());
    }

    #[test]
    fn distance_to_signal_examples() {
        let r = Route::default_ring();
        let id = SignalId(0);
        assert_eq!(r.distance_to_signal(200.0, id).unwrap(), 20.0);
        assert_eq!(r.distance_to_signal(230.0, id).unwrap(), 790.0);
        assert_eq!(r.distance_to_signal(220.0, id).unwrap(), 0.0);
        assert_eq!(
            r.distance_to_signal(0.0, SignalId(9)),
            Err(RouteError::UnknownSignal(SignalId(9)))
        );
    }

    #[test]
    fn on_path_point_has_zero_cte() {
        let r = Route::default_ring();
        let (x, y) = r.point_at(123.4, 0.0);
        let p = r.project(x, y);
        assert!(p.cte.abs() < 1e-9);
        assert!((p.arc_s - 123.4).abs() < 1e-9);
    }

    #[test]
    fn radial_offset_on_circle() {
        let r = Route::default_ring();
        let radius = 800.0 / (2.0 * PI);
        let theta = 0.3f64;
        let p = r.project((radius + 1.0) * theta.cos(), (radius + 1.0) * theta.sin());
        // chord sagitta at 1 m spacing is ~1e-3 m
        assert!((p.cte.abs() - 1.0).abs() < 2e-3);
        assert!(p.cte < 0.0, "outside a ccw loop is to the right");
    }

    #[test]
    fn projection_matches_dense_nearest_point() {
        let r = Route::default_ring();
        let radius = 800.0 / (2.0 * PI);
        let mut seed = 0x2545_f491_u64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let ang = next() * 2.0 * PI;
            let rad = radius + (next() - 0.5) * 20.0;
            let (x, y) = (rad * ang.cos(), rad * ang.sin());
            // brute force over a 0.05 m sampling of the centreline
            let mut best = (f64::INFINITY, 0.0);
            let mut s = 0.0;
            while s < 800.0 {
                let (px, py) = r.point_at(s, 0.0);
                let d = (px - x).hypot(py - y);
                if d < best.0 {
                    best = (d, s);
                }
                s += 0.05;
            }
            let p = r.project(x, y);
            let diff = (p.arc_s - best.1).abs();
            assert!(diff.min(800.0 - diff) <= 1.0, "{} vs {}", p.arc_s, best.1);
        }
    }

    #[test]
    fn heading_is_unwrapped_and_linear_on_circle() {
        let r = Route::default_ring();
        let rate = 2.0 * PI / 800.0;
        for s in [0.0, 0.3, 0.5, 100.0, 799.7, 800.2, 1650.0] {
            let expected = rate * s;
            assert!((r.heading(s) - expected).abs() < 1e-9, "s={s}");
            assert!((r.heading_rate(s) - rate).abs() < 1e-9);
        }
        assert!((r.total_turn - 2.0 * PI).abs() < 1e-9);
    }

    #[test]
    fn corridors_must_partition() {
        let mut c = default_corridors();
        c[1].start_s = 230.0;
        assert!(matches!(
            Route::circle(800.0, 1.0, c, default_signal_sites()),
            Err(RouteError::BadCorridors { .. })
        ));
    }

    #[test]
    fn next_signal_picks_nearest_ahead() {
        let r = Route::default_ring();
        let (site, d) = r.next_signal(600.0).unwrap();
        assert_eq!(site.signal_id, SignalId(0));
        assert!((d - 420.0).abs() < 1e-9);
        assert_eq!(r.corridor_at(700.0).unwrap().name, "corridor-3");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn phase_is_periodic(t in 0.0f64..1e4, off in 0.0f64..38.0) {
                let c = SignalController::new(SignalId(0), default_cycle(), off).unwrap();
                let (p0, r0) = c.phase_at(t);
                let (p1, r1) = c.phase_at(t + c.period());
                // rem_euclid can land a hair either side of a phase boundary
                prop_assume!(r0 > 1e-6 && r1 > 1e-6);
                prop_assert_eq!(p0, p1);
                prop_assert!((r0 - r1).abs() < 1e-6);
            }

            #[test]
            fn signal_distance_in_range(s in -2000.0f64..2000.0) {
                let r = Route::default_ring();
                let d = r.distance_to_signal(s, SignalId(1)).unwrap();
                prop_assert!((0.0..800.0).contains(&d));
            }

            #[test]
            fn offset_point_projects_back(s in 0.0f64..800.0, d in -5.0f64..5.0) {
                let r = Route::default_ring();
                let (x, y) = r.point_at(s, d);
                let p = r.project(x, y);
                let ds = (p.arc_s - s).abs();
                prop_assert!(ds.min(800.0 - ds) < 1.0);
                prop_assert!((p.cte - d).abs() < 0.05);
            }
        }
    }
}
