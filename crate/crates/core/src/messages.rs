//! V2X payloads exchanged between signals, platoon leaders and members.
//!
//! Three message kinds exist: SPaT from each signal, PCM from each vehicle
//! and PAM from each platoon leader. SPaT delivery is gated by the DSRC
//! range; intra-platoon PCM/PAM traffic is always delivered.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisory::GreenWindow;

/// Delivery radius for SPaT broadcasts, measured forward along the route.
pub const DSRC_RANGE_M: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignalId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl std::fmt::Display for SignalId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Green,
    Amber,
    Red,
}

impl Phase {
    /// Amber is never treated as passable.
    pub fn is_passable(self) -> bool {
        matches!(self, Phase::Green)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Green => "green",
            Phase::Amber => "amber",
            Phase::Red => "red",
        }
    }
}

/// One entry of a fixed signal cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: Phase,
    pub duration: f64,
}

impl PhaseSpan {
    pub const fn new(phase: Phase, duration: f64) -> Self {
        Self { phase, duration }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MessageError {
    #[error("route length must be positive and finite, got {0}")]
    InvalidRoute(f64),
    #[error("cycle plan has no green phase")]
    NoGreenWindow,
    #[error("cycle plan is empty")]
    EmptyCycle,
    #[error("cycle phase {index} has non-positive duration {duration}")]
    BadDuration { index: usize, duration: f64 },
    #[error("current phase {0:?} does not appear in the cycle plan")]
    PhaseNotInPlan(Phase),
    #[error("phase_remaining {remaining} outside [0, {duration}]")]
    BadRemaining { remaining: f64, duration: f64 },
    #[error("invalid field {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

/// Signal phase and timing broadcast.
///
/// The full fixed `cycle_plan` is included so that receivers can roll the
/// cycle forward and compute future green windows. The current phase is
/// located at the first plan entry carrying `phase`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatMessage {
    pub signal_id: SignalId,
    pub phase: Phase,
    pub phase_remaining: f64,
    pub cycle_plan: Vec<PhaseSpan>,
    pub timestamp: f64,
}

/// Checks the structural invariants of a cycle plan.
pub fn validate_cycle(plan: &[PhaseSpan]) -> Result<(), MessageError> {
    if plan.is_empty() {
        return Err(MessageError::EmptyCycle);
    }
    for (index, span) in plan.iter().enumerate() {
        if !(span.duration > 0.0) || !span.duration.is_finite() {
            return Err(MessageError::BadDuration {
                index,
                duration: span.duration,
            });
        }
    }
    if !plan.iter().any(|s| s.phase == Phase::Green) {
        return Err(MessageError::NoGreenWindow);
    }
    Ok(())
}

impl SpatMessage {
    pub fn validate(&self) -> Result<(), MessageError> {
        validate_cycle(&self.cycle_plan)?;
        let index = self.current_index()?;
        let duration = self.cycle_plan[index].duration;
        // small slack for accumulated float error in phase bookkeeping
        if !(self.phase_remaining >= 0.0) || self.phase_remaining > duration + 1e-9 {
            return Err(MessageError::BadRemaining {
                remaining: self.phase_remaining,
                duration,
            });
        }
        Ok(())
    }

    fn current_index(&self) -> Result<usize, MessageError> {
        self.cycle_plan
            .iter()
            .position(|s| s.phase == self.phase)
            .ok_or(MessageError::PhaseNotInPlan(self.phase))
    }

    pub fn cycle_period(&self) -> f64 {
        self.cycle_plan.iter().map(|s| s.duration).sum()
    }

    /// Successive passable windows starting from `now`, in time order.
    pub fn green_windows(&self, now: f64) -> Result<GreenWindows<'_>, MessageError> {
        self.validate()?;
        let index = self.current_index()?;
        let phase_start = now + self.phase_remaining - self.cycle_plan[index].duration;
        Ok(GreenWindows {
            plan: &self.cycle_plan,
            index,
            phase_start,
            now,
        })
    }
}

/// Iterator over future green windows of a fixed cycle.
#[derive(Debug, Clone)]
pub struct GreenWindows<'a> {
    plan: &'a [PhaseSpan],
    index: usize,
    phase_start: f64,
    now: f64,
}

impl GreenWindows<'_> {
    fn advance(&mut self) {
        self.phase_start += self.plan[self.index].duration;
        self.index = (self.index + 1) % self.plan.len();
    }
}

impl Iterator for GreenWindows<'_> {
    type Item = GreenWindow;

    fn next(&mut self) -> Option<GreenWindow> {
        // at most two full cycles are needed to find a non-degenerate green
        for _ in 0..=2 * self.plan.len() {
            if self.plan[self.index].phase != Phase::Green {
                self.advance();
                continue;
            }
            let start = self.phase_start.max(self.now);
            let mut end = self.phase_start + self.plan[self.index].duration;
            self.advance();
            let mut merged = 1;
            while self.plan[self.index].phase == Phase::Green && merged < self.plan.len() {
                end += self.plan[self.index].duration;
                self.advance();
                merged += 1;
            }
            if end > start {
                return Some(GreenWindow {
                    t_g_start: start,
                    t_g_end: end,
                });
            }
        }
        None
    }
}

/// The current green window if the signal is green, otherwise the next one.
pub fn next_green_window(spat: &SpatMessage, now: f64) -> Result<GreenWindow, MessageError> {
    spat.green_windows(now)?.next().ok_or(MessageError::NoGreenWindow)
}

/// Forward arc distance from `from` to `to` on a closed route.
pub fn forward_distance(from: f64, to: f64, route_length: f64) -> Result<f64, MessageError> {
    if !(route_length > 0.0) || !route_length.is_finite() {
        return Err(MessageError::InvalidRoute(route_length));
    }
    Ok((to - from).rem_euclid(route_length))
}

/// Whether a leader at `leader_position` receives SPaT from the signal at
/// `signal_position`, using the default 300 m range.
pub fn in_dsrc_range(leader_position: f64, signal_position: f64, route_length: f64) -> Result<bool, MessageError> {
    in_range(DSRC_RANGE_M, leader_position, signal_position, route_length)
}

pub fn in_range(
    range: f64,
    leader_position: f64,
    signal_position: f64,
    route_length: f64,
) -> Result<bool, MessageError> {
    Ok(forward_distance(leader_position, signal_position, route_length)? <= range)
}

/// Platoon Control Message: per-vehicle state report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonControlMessage {
    pub vehicle_id: VehicleId,
    pub position_along_route: f64,
    pub velocity: f64,
    pub vehicle_length: f64,
    pub gap_to_predecessor: f64,
    pub timestamp: f64,
}

impl PlatoonControlMessage {
    pub fn validate(&self) -> Result<(), MessageError> {
        if !(self.velocity >= 0.0) {
            return Err(invalid("velocity", format!("{} < 0", self.velocity)));
        }
        if !(self.vehicle_length > 0.0) {
            return Err(invalid("vehicle_length", format!("{} <= 0", self.vehicle_length)));
        }
        if !(self.gap_to_predecessor >= 0.0) {
            return Err(invalid(
                "gap_to_predecessor",
                format!("{} < 0", self.gap_to_predecessor),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDecision {
    pub front_ids: Vec<VehicleId>,
    pub rear_ids: Vec<VehicleId>,
}

/// Platoon Awareness Message: leader-originated platoon metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonAwarenessMessage {
    pub leader_id: VehicleId,
    pub platoon_size: usize,
    pub platoon_length: f64,
    pub predicted_arrival_time: f64,
    pub split_decision: Option<SplitDecision>,
    pub timestamp: f64,
}

impl PlatoonAwarenessMessage {
    pub fn validate(&self, min_vehicle_length: f64) -> Result<(), MessageError> {
        if self.platoon_size == 0 {
            return Err(invalid("platoon_size", "must be at least 1".into()));
        }
        if self.platoon_length + 1e-9 < self.platoon_size as f64 * min_vehicle_length {
            return Err(invalid(
                "platoon_length",
                format!(
                    "{} shorter than {} vehicles of {} m",
                    self.platoon_length, self.platoon_size, min_vehicle_length
                ),
            ));
        }
        if let Some(split) = &self.split_decision {
            let mut ids: Vec<VehicleId> = split.front_ids.iter().chain(split.rear_ids.iter()).copied().collect();
            let total = ids.len();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != total {
                return Err(invalid("split_decision", "front and rear overlap".into()));
            }
            if total != self.platoon_size {
                return Err(invalid(
                    "split_decision",
                    format!("covers {total} of {} members", self.platoon_size),
                ));
            }
            if !split.front_ids.contains(&self.leader_id) {
                return Err(invalid("split_decision", "leader not in front".into()));
            }
        }
        Ok(())
    }
}

fn invalid(field: &'static str, reason: String) -> MessageError {
    MessageError::InvalidField { field, reason }
}

/// Tagged envelope used when messages are written to the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum V2xMessage {
    Spat(SpatMessage),
    Pcm(PlatoonControlMessage),
    Pam(PlatoonAwarenessMessage),
}
