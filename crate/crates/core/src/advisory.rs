//! Green-window speed advisory with platoon splitting.
//!
//! Given the distance to the next stop line, the platoon layout and the
//! signal's next green window, [`coordinate`] produces a reference velocity
//! for the platoon leader and a front/rear partition of the members. A
//! split is only published once the same partition has been proposed
//! continuously for the consensus period.
//!
//! All window comparisons are made in time relative to `now`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::messages::{PlatoonControlMessage, VehicleId};

/// Absolute-time interval during which the signal is passable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenWindow {
    pub t_g_start: f64,
    pub t_g_end: f64,
}

/// A green window expressed as seconds from now.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeWindow {
    pub start: f64,
    pub end: f64,
}

impl GreenWindow {
    pub fn relative(&self, now: f64) -> RelativeWindow {
        RelativeWindow {
            start: (self.t_g_start - now).max(0.0),
            end: self.t_g_end - now,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AdvisoryError {
    #[error("green window needs {required} m/s, above the {limit} m/s limit")]
    WindowInfeasible { required: f64, limit: f64 },
    #[error("zero velocity never reaches the stop line")]
    InfiniteArrival,
    #[error("platoon snapshot has no members")]
    EmptyPlatoon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlatoonMember {
    pub vehicle_id: VehicleId,
    pub arc_s: f64,
    pub velocity: f64,
    pub vehicle_length: f64,
    /// Bumper-to-bumper gap to the member ahead; ignored for the leader.
    pub gap_to_predecessor: f64,
}

/// Ordered platoon members, leader first, with prefix lengths so that
/// "leader front to member i rear" is an O(1) lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatoonSnapshot {
    members: Vec<PlatoonMember>,
    prefix: Vec<f64>,
}

impl PlatoonSnapshot {
    pub fn new(members: Vec<PlatoonMember>) -> Result<Self, AdvisoryError> {
        if members.is_empty() {
            return Err(AdvisoryError::EmptyPlatoon);
        }
        let mut prefix = Vec::with_capacity(members.len());
        let mut total = 0.0;
        for (i, m) in members.iter().enumerate() {
            if i > 0 {
                total += m.gap_to_predecessor;
            }
            total += m.vehicle_length;
            prefix.push(total);
        }
        Ok(Self { members, prefix })
    }

    /// Builds a snapshot from member PCMs ordered leader to tail.
    pub fn from_pcms(pcms: &[PlatoonControlMessage]) -> Result<Self, AdvisoryError> {
        Self::new(
            pcms.iter()
                .map(|p| PlatoonMember {
                    vehicle_id: p.vehicle_id,
                    arc_s: p.position_along_route,
                    velocity: p.velocity,
                    vehicle_length: p.vehicle_length,
                    gap_to_predecessor: p.gap_to_predecessor,
                })
                .collect(),
        )
    }

    pub fn members(&self) -> &[PlatoonMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn leader(&self) -> &PlatoonMember {
        &self.members[0]
    }

    pub fn ids(&self) -> Vec<VehicleId> {
        self.members.iter().map(|m| m.vehicle_id).collect()
    }

    /// Total platoon length: vehicle lengths plus inter-vehicle gaps.
    pub fn d_platoon(&self) -> f64 {
        *self.prefix.last().expect("nonempty")
    }

    /// Distance from the leader's front to the rear of member `index`.
    pub fn length_up_to(&self, index: usize) -> f64 {
        self.prefix[index]
    }

    /// Checks that member order matches arc positions on a ring of
    /// `route_length`: each member sits `length + gap` behind its predecessor.
    pub fn is_consistent(&self, route_length: f64, tol: f64) -> bool {
        self.members.windows(2).all(|w| {
            let spacing = (w[0].arc_s - w[1].arc_s).rem_euclid(route_length);
            (spacing - w[0].vehicle_length - w[1].gap_to_predecessor).abs() <= tol
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvisoryLimits {
    pub v_limit: f64,
    /// Slowest speed the advisory will ever recommend.
    pub v_floor: f64,
    /// Guard on the time to window opening.
    pub epsilon: f64,
}

impl Default for AdvisoryLimits {
    fn default() -> Self {
        Self {
            v_limit: 13.89,
            v_floor: 1.0,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibleVelocities {
    pub v_min: f64,
    pub v_max: f64,
}

impl FeasibleVelocities {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.v_min && v <= self.v_max
    }
}

pub fn initial_delay_active(t: f64, delay: f64) -> bool {
    t < delay
}

/// Velocity band that reaches the stop line inside the window: the upper
/// bound arrives as the window opens, the lower bound as it closes.
pub fn get_feasible_velocities(
    d_tl: f64,
    window: &GreenWindow,
    now: f64,
    limits: &AdvisoryLimits,
) -> Result<FeasibleVelocities, AdvisoryError> {
    let rel = window.relative(now);
    let required = if rel.end > 0.0 { d_tl / rel.end } else { f64::INFINITY };
    if required > limits.v_limit {
        return Err(AdvisoryError::WindowInfeasible {
            required,
            limit: limits.v_limit,
        });
    }
    let v_max = (d_tl / rel.start.max(limits.epsilon)).clamp(limits.v_floor, limits.v_limit);
    let v_min = required.clamp(limits.v_floor, v_max);
    Ok(FeasibleVelocities { v_min, v_max })
}

/// Whether the whole platoon can flow through the stop line within the
/// remaining green time without exceeding `v_max_f`.
pub fn saturation_check(snapshot: &PlatoonSnapshot, window: &GreenWindow, now: f64, v_max_f: f64) -> bool {
    let span = window.t_g_end - window.t_g_start.max(now);
    if span <= 0.0 {
        return false;
    }
    snapshot.d_platoon() / span <= v_max_f
}

/// Arrival of the leader's front and of a platoon of length `length`.
pub fn arrival_times(v: f64, d_tl: f64, length: f64) -> Result<(f64, f64), AdvisoryError> {
    if !(v > 0.0) {
        return Err(AdvisoryError::InfiniteArrival);
    }
    Ok((d_tl / v, (d_tl + length) / v))
}

pub fn get_arrival_times(v: f64, d_tl: f64, snapshot: &PlatoonSnapshot) -> Result<(f64, f64), AdvisoryError> {
    arrival_times(v, d_tl, snapshot.d_platoon())
}

/// Slows down to avoid arriving before the window opens, or speeds up to
/// avoid arriving after it closes, then clamps into `bounds`.
pub fn check_leader_arrival(v: f64, d_tl: f64, window: &RelativeWindow, bounds: &FeasibleVelocities) -> f64 {
    let t_arrival = d_tl / v;
    let v = if t_arrival < window.start {
        bounds.v_min.max(d_tl / window.start)
    } else if t_arrival > window.end {
        bounds.v_max.min(d_tl / window.end)
    } else {
        v
    };
    v.clamp(bounds.v_min, bounds.v_max)
}

/// Feasible velocity closest to the current one.
pub fn optimize_velocity(v_min_f: f64, v_max_f: f64, v_current: f64) -> f64 {
    v_current.clamp(v_min_f, v_max_f)
}

/// Whether the whole group of length `length` passes at `v`: the leader
/// arrives inside the window and the tail before it closes.
pub fn whole_platoon_passes(v: f64, d_tl: f64, length: f64, window: &RelativeWindow) -> bool {
    match arrival_times(v, d_tl, length) {
        Ok((t_lead, t_last)) => window.start <= t_lead && t_lead <= window.end && t_last <= window.end,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub front: Vec<VehicleId>,
    pub rear: Vec<VehicleId>,
}

/// Grows the front group from the leader while each added member's rear
/// still clears the stop line before the window closes at `v_ref`.
pub fn split_platoon(snapshot: &PlatoonSnapshot, v_ref: f64, d_tl: f64, window: &RelativeWindow) -> Partition {
    let front_len = front_size(snapshot, v_ref, d_tl, window);
    let ids = snapshot.members();
    Partition {
        front: ids[..front_len].iter().map(|m| m.vehicle_id).collect(),
        rear: ids[front_len..].iter().map(|m| m.vehicle_id).collect(),
    }
}

fn front_size(snapshot: &PlatoonSnapshot, v_ref: f64, d_tl: f64, window: &RelativeWindow) -> usize {
    let mut size = 1;
    for i in 1..snapshot.len() {
        let feasible = v_ref > 0.0 && (d_tl + snapshot.length_up_to(i)) / v_ref <= window.end;
        if !feasible {
            break;
        }
        size += 1;
    }
    size
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionReason {
    Whole,
    SaturationSplit,
    ArrivalSplit,
    HoldNoSpat,
    HoldDelay,
    InfeasibleStop,
}

impl DecisionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionReason::Whole => "whole",
            DecisionReason::SaturationSplit => "saturation-split",
            DecisionReason::ArrivalSplit => "arrival-split",
            DecisionReason::HoldNoSpat => "hold-no-spat",
            DecisionReason::HoldDelay => "hold-delay",
            DecisionReason::InfeasibleStop => "infeasible-stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryDecision {
    pub v_ref: f64,
    pub front: Vec<VehicleId>,
    pub rear: Vec<VehicleId>,
    pub pending_consensus: bool,
    pub reason: DecisionReason,
    /// The window cannot be made; the leader should prepare to stop.
    pub stop_required: bool,
}

impl AdvisoryDecision {
    pub fn is_split(&self) -> bool {
        !self.rear.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvisorySettings {
    pub initial_delay: f64,
    pub consensus_period: f64,
    /// Declared for completeness; the saturation test uses the platoon
    /// length over the green span instead.
    pub v_sat: f64,
}

impl Default for AdvisorySettings {
    fn default() -> Self {
        Self {
            initial_delay: 5.0,
            consensus_period: 0.2,
            v_sat: 0.0,
        }
    }
}

/// Split proposal awaiting confirmation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub front_len: usize,
    pub since: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub proposal: Option<Proposal>,
}

/// Everything the coordinator reads for one platoon on one tick.
#[derive(Debug, Clone, Copy)]
pub struct CoordinationInput<'a> {
    pub snapshot: &'a PlatoonSnapshot,
    pub d_tl: f64,
    pub window: Option<GreenWindow>,
    /// The platoon's held reference velocity.
    pub v_current: f64,
    pub now: f64,
    pub limits: &'a AdvisoryLimits,
    pub settings: &'a AdvisorySettings,
}

/// Reference velocity for a front group of `front_len` members: the
/// leader-arrival correction, raised if needed so the group's tail clears
/// before the window closes. The group shrinks from the tail until the
/// whole-group predicate holds (the leader alone is always kept).
fn adjust_for_split(
    snapshot: &PlatoonSnapshot,
    mut front_len: usize,
    v_cand: f64,
    d_tl: f64,
    window: &RelativeWindow,
    bounds: &FeasibleVelocities,
) -> (usize, f64) {
    loop {
        let length = snapshot.length_up_to(front_len - 1);
        let mut v = check_leader_arrival(v_cand, d_tl, window, bounds);
        if window.end > 0.0 {
            v = v.max((d_tl + length) / window.end).min(bounds.v_max);
        }
        if front_len == 1 || whole_platoon_passes(v, d_tl, length, window) {
            return (front_len, v);
        }
        front_len -= 1;
    }
}

/// One coordination step for a platoon leader.
pub fn coordinate(input: CoordinationInput<'_>, consensus: ConsensusState) -> (AdvisoryDecision, ConsensusState) {
    let snapshot = input.snapshot;
    let hold = |reason, stop_required| AdvisoryDecision {
        v_ref: input.v_current,
        front: snapshot.ids(),
        rear: Vec::new(),
        pending_consensus: false,
        reason,
        stop_required,
    };

    if initial_delay_active(input.now, input.settings.initial_delay) {
        return (hold(DecisionReason::HoldDelay, false), ConsensusState::default());
    }
    let Some(window) = input.window else {
        return (hold(DecisionReason::HoldNoSpat, false), ConsensusState::default());
    };
    let bounds = match get_feasible_velocities(input.d_tl, &window, input.now, input.limits) {
        Ok(b) => b,
        Err(_) => return (hold(DecisionReason::InfeasibleStop, true), ConsensusState::default()),
    };
    let rel = window.relative(input.now);
    let v_cand = optimize_velocity(bounds.v_min, bounds.v_max, input.v_current);

    let (reason, front_len, v_ref) = if !saturation_check(snapshot, &window, input.now, bounds.v_max) {
        let k = front_size(snapshot, bounds.v_max, input.d_tl, &rel);
        let (k, v) = adjust_for_split(snapshot, k, v_cand, input.d_tl, &rel, &bounds);
        (DecisionReason::SaturationSplit, k, v)
    } else if whole_platoon_passes(v_cand, input.d_tl, snapshot.d_platoon(), &rel) {
        (DecisionReason::Whole, snapshot.len(), v_cand)
    } else {
        let k = front_size(snapshot, bounds.v_max, input.d_tl, &rel);
        let (k, v) = adjust_for_split(snapshot, k, v_cand, input.d_tl, &rel, &bounds);
        (DecisionReason::ArrivalSplit, k, v)
    };

    let members = snapshot.members();
    if front_len == snapshot.len() {
        let decision = AdvisoryDecision {
            v_ref,
            front: snapshot.ids(),
            rear: Vec::new(),
            pending_consensus: false,
            reason,
            stop_required: false,
        };
        return (decision, ConsensusState::default());
    }

    // a split must be proposed unchanged for the consensus period
    let proposal = match consensus.proposal {
        Some(p) if p.front_len == front_len => p,
        _ => Proposal {
            front_len,
            since: input.now,
        },
    };
    let confirmed = input.now - proposal.since >= input.settings.consensus_period - 1e-9;
    if confirmed {
        let decision = AdvisoryDecision {
            v_ref,
            front: members[..front_len].iter().map(|m| m.vehicle_id).collect(),
            rear: members[front_len..].iter().map(|m| m.vehicle_id).collect(),
            pending_consensus: false,
            reason,
            stop_required: false,
        };
        (decision, ConsensusState::default())
    } else {
        let decision = AdvisoryDecision {
            v_ref: v_cand,
            front: snapshot.ids(),
            rear: Vec::new(),
            pending_consensus: true,
            reason,
            stop_required: false,
        };
        (
            decision,
            ConsensusState {
                proposal: Some(proposal),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Members laid out behind a leader at `head` with the given lengths and gaps.
    pub(crate) fn snapshot(head: f64, lengths: &[f64], gaps: &[f64]) -> PlatoonSnapshot {
        let mut pos = head;
        let mut members = Vec::new();
        for (i, &len) in lengths.iter().enumerate() {
            let gap = if i == 0 { 0.0 } else { gaps[i - 1] };
            if i > 0 {
                pos -= lengths[i - 1] + gap;
            }
            members.push(PlatoonMember {
                vehicle_id: VehicleId(i as u32),
                arc_s: pos,
                velocity: 10.0,
                vehicle_length: len,
                gap_to_predecessor: gap,
            });
        }
        PlatoonSnapshot::new(members).unwrap()
    }

    fn uniform(n: usize, len: f64, gap: f64) -> PlatoonSnapshot {
        snapshot(500.0, &vec![len; n], &vec![gap; n.saturating_sub(1)])
    }

    fn limits() -> AdvisoryLimits {
        AdvisoryLimits::default()
    }

    fn win(now: f64, start: f64, end: f64) -> GreenWindow {
        GreenWindow {
            t_g_start: now + start,
            t_g_end: now + end,
        }
    }

    #[test]
    fn initial_delay_boundary() {
        assert!(initial_delay_active(3.0, 5.0));
        assert!(!initial_delay_active(5.0, 5.0));
        assert!(!initial_delay_active(60.0, 5.0));
    }

    #[test]
    fn feasible_velocity_examples() {
        let b = get_feasible_velocities(139.0, &win(7.0, 10.0, 20.0), 7.0, &limits()).unwrap();
        assert_eq!(b.v_max, 13.89);
        assert!((b.v_min - 6.95).abs() < 1e-12);

        let b = get_feasible_velocities(100.0, &win(3.0, 0.0, 10.0), 3.0, &limits()).unwrap();
        assert_eq!(b.v_max, 13.89);
        assert!((b.v_min - 10.0).abs() < 1e-12);

        assert!(matches!(
            get_feasible_velocities(300.0, &win(0.0, 0.0, 10.0), 0.0, &limits()),
            Err(AdvisoryError::WindowInfeasible { .. })
        ));
    }

    #[test]
    fn saturation_examples() {
        let w = win(0.0, 2.0, 10.0);
        // 40 m platoon over an 8 s span
        assert!(saturation_check(&snapshot(0.0, &[40.0], &[]), &w, 0.0, 13.89));
        assert!(!saturation_check(&snapshot(0.0, &[120.0], &[]), &w, 0.0, 13.89));
        assert!(saturation_check(&snapshot(0.0, &[0.0], &[]), &w, 0.0, 13.89));
        let closed = GreenWindow {
            t_g_start: 5.0,
            t_g_end: 5.0,
        };
        assert!(!saturation_check(&snapshot(0.0, &[0.0], &[]), &closed, 0.0, 13.89));
    }

    #[test]
    fn arrival_examples() {
        assert_eq!(arrival_times(10.0, 100.0, 30.0).unwrap(), (10.0, 13.0));
        let (a, b) = arrival_times(7.0, 90.0, 0.0).unwrap();
        assert_eq!(a, b);
        let (a, b) = arrival_times(13.9, 139.0, 41.7).unwrap();
        assert!((a - 10.0).abs() < 1e-12 && (b - 13.0).abs() < 1e-12);
        assert_eq!(arrival_times(0.0, 1.0, 1.0), Err(AdvisoryError::InfiniteArrival));
        let s = uniform(3, 4.0, 10.0);
        assert_eq!(get_arrival_times(10.0, 100.0, &s).unwrap(), (10.0, 13.2));
    }

    #[test]
    fn leader_arrival_examples() {
        let wide = FeasibleVelocities {
            v_min: 1.0,
            v_max: 13.89,
        };
        let v = check_leader_arrival(20.0, 200.0, &RelativeWindow { start: 15.0, end: 30.0 }, &wide);
        assert!((v - 200.0 / 15.0).abs() < 1e-12);

        let v = check_leader_arrival(10.0, 100.0, &RelativeWindow { start: 5.0, end: 30.0 }, &wide);
        assert_eq!(v, 10.0);

        let v = check_leader_arrival(4.0, 100.0, &RelativeWindow { start: 0.0, end: 20.0 }, &wide);
        assert_eq!(v, 5.0);
        let tight = FeasibleVelocities { v_min: 1.0, v_max: 4.5 };
        let v = check_leader_arrival(4.0, 100.0, &RelativeWindow { start: 0.0, end: 20.0 }, &tight);
        assert_eq!(v, 4.5);
    }

    #[test]
    fn optimize_examples() {
        assert_eq!(optimize_velocity(7.0, 13.0, 10.0), 10.0);
        assert_eq!(optimize_velocity(7.0, 13.0, 5.0), 7.0);
        assert_eq!(optimize_velocity(7.0, 13.0, 15.0), 13.0);
    }

    #[test]
    fn split_examples() {
        // rears at 0 / 15 / 30 / 45 m behind the leader's front
        let s = snapshot(100.0, &[0.0, 0.0, 0.0, 0.0], &[15.0, 15.0, 15.0]);
        let p = split_platoon(&s, 10.0, 100.0, &RelativeWindow { start: 0.0, end: 12.0 });
        assert_eq!(p.front, vec![VehicleId(0), VehicleId(1)]);
        assert_eq!(p.rear, vec![VehicleId(2), VehicleId(3)]);

        let p = split_platoon(&s, 10.0, 100.0, &RelativeWindow { start: 0.0, end: 60.0 });
        assert_eq!(p.front.len(), 4);
        assert!(p.rear.is_empty());

        let p = split_platoon(&s, 10.0, 100.0, &RelativeWindow { start: 0.0, end: 5.0 });
        assert_eq!(p.front, vec![VehicleId(0)]);

        let solo = uniform(1, 4.5, 0.0);
        let p = split_platoon(&solo, 10.0, 100.0, &RelativeWindow { start: 0.0, end: 1.0 });
        assert_eq!(p.front, vec![VehicleId(0)]);
        assert!(p.rear.is_empty());
    }

    #[test]
    fn snapshot_lengths() {
        let s = uniform(3, 4.5, 10.0);
        assert_eq!(s.d_platoon(), 33.5);
        assert_eq!(s.length_up_to(0), 4.5);
        assert_eq!(s.length_up_to(1), 19.0);
        assert!(s.is_consistent(800.0, 0.1));
        assert_eq!(PlatoonSnapshot::new(vec![]), Err(AdvisoryError::EmptyPlatoon));
    }

    fn input<'a>(
        snap: &'a PlatoonSnapshot,
        d_tl: f64,
        window: Option<GreenWindow>,
        v_current: f64,
        now: f64,
        l: &'a AdvisoryLimits,
        s: &'a AdvisorySettings,
    ) -> CoordinationInput<'a> {
        CoordinationInput {
            snapshot: snap,
            d_tl,
            window,
            v_current,
            now,
            limits: l,
            settings: s,
        }
    }

    #[test]
    fn delay_and_no_spat_hold_velocity() {
        let (l, st) = (limits(), AdvisorySettings::default());
        let s = uniform(4, 4.5, 10.0);
        let (d, _) = coordinate(
            input(&s, 100.0, Some(win(2.0, 0.0, 10.0)), 7.5, 2.0, &l, &st),
            ConsensusState::default(),
        );
        assert_eq!(d.v_ref, 7.5);
        assert_eq!(d.front.len(), 4);
        assert!(d.rear.is_empty() && !d.pending_consensus);
        assert_eq!(d.reason, DecisionReason::HoldDelay);

        let (d, _) = coordinate(input(&s, 400.0, None, 9.0, 20.0, &l, &st), ConsensusState::default());
        assert_eq!((d.v_ref, d.reason), (9.0, DecisionReason::HoldNoSpat));
    }

    #[test]
    fn infeasible_window_flags_stop() {
        let (l, st) = (limits(), AdvisorySettings::default());
        let s = uniform(2, 4.5, 10.0);
        let (d, _) = coordinate(
            input(&s, 300.0, Some(win(10.0, 0.0, 10.0)), 8.0, 10.0, &l, &st),
            ConsensusState::default(),
        );
        assert_eq!(d.reason, DecisionReason::InfeasibleStop);
        assert!(d.stop_required);
        assert_eq!(d.v_ref, 8.0);
    }

    #[test]
    fn whole_platoon_passes_at_candidate() {
        let (l, st) = (limits(), AdvisorySettings::default());
        let s = uniform(4, 4.5, 10.0);
        // window [5, 40] s, 100 m away: 10 m/s arrives at 10 s, tail at 14.8 s
        let (d, c) = coordinate(
            input(&s, 100.0, Some(win(10.0, 5.0, 40.0)), 10.0, 10.0, &l, &st),
            ConsensusState::default(),
        );
        assert_eq!(d.reason, DecisionReason::Whole);
        assert_eq!(d.v_ref, 10.0);
        assert_eq!(d.front.len(), 4);
        assert_eq!(c, ConsensusState::default());
    }

    #[test]
    fn split_waits_for_consensus_then_publishes_once() {
        let (l, st) = (limits(), AdvisorySettings::default());
        let s = uniform(8, 4.5, 10.0);
        // 6 s of green for a 106 m platoon needs 17.7 m/s: saturation fails
        let mut consensus = ConsensusState::default();
        let mut published = 0;
        for k in 0..6 {
            let now = 10.0 + 0.1 * k as f64;
            let w = GreenWindow {
                t_g_start: 12.0,
                t_g_end: 18.0,
            };
            let d_tl = 60.0 - 6.0 * (now - 10.0);
            let (d, next) = coordinate(input(&s, d_tl, Some(w), 8.0, now, &l, &st), consensus);
            consensus = next;
            assert_eq!(d.reason, DecisionReason::SaturationSplit);
            assert_eq!(d.front[0], VehicleId(0));
            if d.is_split() {
                published += 1;
                assert_eq!(k, 2, "confirmed after 0.2 s");
                assert!(!d.pending_consensus);
                break;
            }
            assert!(d.pending_consensus);
        }
        assert_eq!(published, 1);
    }

    #[test]
    fn reversed_split_is_never_published() {
        let (l, st) = (limits(), AdvisorySettings::default());
        let s = uniform(8, 4.5, 10.0);
        let split_window = GreenWindow {
            t_g_start: 12.0,
            t_g_end: 20.0,
        };
        let long_window = GreenWindow {
            t_g_start: 12.0,
            t_g_end: 60.0,
        };
        let mut c = ConsensusState::default();
        for (k, w) in [split_window, split_window, long_window, split_window, split_window]
            .into_iter()
            .enumerate()
        {
            let (d, next) = coordinate(input(&s, 60.0, Some(w), 8.0, 10.0 + 0.1 * k as f64, &l, &st), c);
            assert!(!d.is_split(), "tick {k}");
            c = next;
        }
    }
}
