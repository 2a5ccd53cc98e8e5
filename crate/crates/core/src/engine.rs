//! Fixed-step scenario runner.
//!
//! Each 0.1 s tick runs in a fixed order: signals advance, messages are
//! built (SPaT only reaches vehicles within DSRC range), every platoon
//! leader runs the advisory and its MPC, followers run CACC, all vehicles
//! step, fuel accrues, confirmed splits are executed and the tick is
//! recorded. Nothing reads the wall clock, so a configuration always
//! produces the same output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisory::{
    coordinate, AdvisoryLimits, AdvisorySettings, ConsensusState, CoordinationInput, DecisionReason, GreenWindow,
    PlatoonSnapshot,
};
use crate::cacc::{self, CaccConfig, CaccState};
use crate::dynamics::{net_acceleration, step, ControlInput, VehicleParams, VehicleState};
use crate::fuel::{fuel_rate, FuelAccumulator, FuelCoefficients, STANDSTILL_SPEED};
use crate::messages::{
    in_range, Phase, PhaseSpan, PlatoonAwarenessMessage, PlatoonControlMessage, SignalId, SpatMessage, SplitDecision,
    VehicleId, DSRC_RANGE_M,
};
use crate::mpc::{MpcConfig, MpcSolver};
use crate::report::RunSummary;
use crate::world::{default_corridors, default_cycle, wrap_angle, Corridor, Route, SignalController, SignalSite};

/// A leader-to-tail spacing this far apart counts as "someone ahead".
const GAP_GUARD_RANGE: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Advisory,
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Advisory => "advisory",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    pub id: SignalId,
    pub arc_s: f64,
    #[serde(default)]
    pub phase_offset: f64,
    #[serde(default = "default_cycle")]
    pub cycle_plan: Vec<PhaseSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteConfig {
    pub length: f64,
    pub waypoint_spacing: f64,
    pub corridors: Vec<Corridor>,
    pub signals: Vec<SignalConfig>,
}

impl Default for RouteConfig {
    fn default() -> Self {
        let cycle = default_cycle();
        let signal = |id, arc_s, phase_offset| SignalConfig {
            id: SignalId(id),
            arc_s,
            phase_offset,
            cycle_plan: cycle.clone(),
        };
        Self {
            length: 800.0,
            waypoint_spacing: 1.0,
            corridors: default_corridors(),
            signals: vec![signal(0, 220.0, 0.0), signal(1, 420.0, 12.0), signal(2, 580.0, 24.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvisoryConfig {
    pub initial_delay: f64,
    pub consensus_period: f64,
    pub dsrc_range: f64,
    pub v_sat: f64,
    pub v_floor: f64,
    pub epsilon: f64,
    /// Aim this long after a window opens (only for windows not yet open).
    pub window_start_margin: f64,
    /// Plan as if the window closed this much earlier.
    pub window_end_margin: f64,
    /// How many upcoming green windows to consider.
    pub window_lookahead: usize,
    /// Probability that a SPaT broadcast is dropped for a receiver.
    pub spat_loss_probability: f64,
}

impl Default for AdvisoryConfig {
    fn default() -> Self {
        Self {
            initial_delay: 5.0,
            consensus_period: 0.2,
            dsrc_range: DSRC_RANGE_M,
            v_sat: 0.0,
            v_floor: 1.0,
            epsilon: 0.1,
            window_start_margin: 0.5,
            window_end_margin: 2.0,
            window_lookahead: 8,
            spat_loss_probability: 0.0,
        }
    }
}

/// Stop-line and headway safety layer applied on top of every controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardConfig {
    /// Vehicles stop this far short of the line.
    pub standoff: f64,
    /// Distance at which a driver without SPaT reacts to the visible phase.
    pub sight_range: f64,
    /// Braking toward a red line starts once the needed deceleration reaches this.
    pub comfort_decel: f64,
    /// Time constant for shedding excess speed behind another vehicle.
    pub headway_tau: f64,
    pub lookahead: f64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            standoff: 1.0,
            sight_range: 100.0,
            comfort_decel: 1.0,
            headway_tau: 1.0,
            lookahead: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub vehicle_count: usize,
    /// Bumper-to-bumper spacing at spawn.
    pub spawn_gap: f64,
    pub vehicle_length: f64,
    pub laps: u32,
    pub dt: f64,
    pub max_time: f64,
    /// Only consumed when message loss is enabled.
    pub seed: u64,
    pub route: RouteConfig,
    pub vehicle: VehicleParams,
    pub mpc: MpcConfig,
    pub cacc: CaccConfig,
    pub fuel: FuelCoefficients,
    pub advisory: AdvisoryConfig,
    pub guard: GuardConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Advisory,
            vehicle_count: 8,
            spawn_gap: 10.0,
            vehicle_length: 4.5,
            laps: 2,
            dt: 0.1,
            max_time: 600.0,
            seed: 0,
            route: RouteConfig::default(),
            vehicle: VehicleParams::default(),
            mpc: MpcConfig::default(),
            cacc: CaccConfig::default(),
            fuel: FuelCoefficients::default(),
            advisory: AdvisoryConfig::default(),
            guard: GuardConfig::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid config field {field}: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

fn config_error(field: impl Into<String>, reason: impl std::fmt::Display) -> ConfigError {
    ConfigError {
        field: field.into(),
        reason: reason.to_string(),
    }
}

fn positive(field: &str, value: f64) -> Result<(), ConfigError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(config_error(field, format!("{value} must be positive")))
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| config_error("config", e.message()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.vehicle_count < 1 {
            return Err(config_error("vehicle_count", "must be at least 1"));
        }
        if self.laps < 1 {
            return Err(config_error("laps", "must be at least 1"));
        }
        positive("vehicle_length", self.vehicle_length)?;
        positive("dt", self.dt)?;
        positive("max_time", self.max_time)?;
        self.vehicle
            .validate()
            .map_err(|e| config_error(format!("vehicle.{}", e.field), e.reason))?;
        let cacc = self.cacc_config();
        cacc.validate()
            .map_err(|e| config_error(format!("cacc.{}", e.field), e.reason))?;
        let min_gap = cacc::desired_gap(0.0, &cacc);
        if !(self.spawn_gap >= min_gap) {
            return Err(config_error(
                "spawn_gap",
                format!("{} is below the standstill desired gap {min_gap}", self.spawn_gap),
            ));
        }
        self.mpc_config().validate().map_err(|e| config_error("mpc", e))?;
        self.fuel
            .validate()
            .map_err(|e| config_error(format!("fuel.{}", e.field), e.reason))?;

        let a = &self.advisory;
        for (field, value) in [
            ("advisory.initial_delay", a.initial_delay),
            ("advisory.consensus_period", a.consensus_period),
            ("advisory.window_start_margin", a.window_start_margin),
            ("advisory.window_end_margin", a.window_end_margin),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(config_error(field, format!("{value} must be >= 0")));
            }
        }
        positive("advisory.dsrc_range", a.dsrc_range)?;
        positive("advisory.v_floor", a.v_floor)?;
        positive("advisory.epsilon", a.epsilon)?;
        if a.window_lookahead < 1 {
            return Err(config_error("advisory.window_lookahead", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&a.spat_loss_probability) {
            return Err(config_error("advisory.spat_loss_probability", "must lie in [0, 1]"));
        }
        let g = &self.guard;
        positive("guard.sight_range", g.sight_range)?;
        positive("guard.comfort_decel", g.comfort_decel)?;
        positive("guard.headway_tau", g.headway_tau)?;
        positive("guard.lookahead", g.lookahead)?;
        if !(g.standoff >= 0.0) {
            return Err(config_error("guard.standoff", "must be >= 0"));
        }

        let route = self.build_route()?;
        let platoon_span = self.vehicle_count as f64 * (self.vehicle_length + self.spawn_gap);
        if platoon_span >= route.length() {
            return Err(config_error("vehicle_count", "vehicles do not fit on the route"));
        }
        self.build_controllers()?;
        Ok(())
    }

    pub fn build_route(&self) -> Result<Route, ConfigError> {
        let sites = self
            .route
            .signals
            .iter()
            .map(|s| SignalSite {
                signal_id: s.id,
                arc_s: s.arc_s,
            })
            .collect();
        positive("route.waypoint_spacing", self.route.waypoint_spacing)?;
        Route::circle(
            self.route.length,
            self.route.waypoint_spacing,
            self.route.corridors.clone(),
            sites,
        )
        .map_err(|e| config_error("route", e))
    }

    pub fn build_controllers(&self) -> Result<Vec<SignalController>, ConfigError> {
        self.route
            .signals
            .iter()
            .enumerate()
            .map(|(i, s)| {
                SignalController::new(s.id, s.cycle_plan.clone(), s.phase_offset)
                    .map_err(|e| config_error(format!("route.signals[{i}]"), e))
            })
            .collect()
    }

    pub fn cacc_config(&self) -> CaccConfig {
        self.cacc.clone().with_vehicle_limits(&self.vehicle)
    }

    pub fn mpc_config(&self) -> MpcConfig {
        self.mpc.clone().with_vehicle_limits(&self.vehicle)
    }

    pub fn advisory_limits(&self) -> AdvisoryLimits {
        AdvisoryLimits {
            v_limit: self.vehicle.v_max,
            v_floor: self.advisory.v_floor,
            epsilon: self.advisory.epsilon,
        }
    }

    pub fn advisory_settings(&self) -> AdvisorySettings {
        AdvisorySettings {
            initial_delay: self.advisory.initial_delay,
            consensus_period: self.advisory.consensus_period,
            v_sat: self.advisory.v_sat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub vehicle_id: VehicleId,
    pub platoon_id: u32,
    pub arc_s: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub u: f64,
    pub delta: f64,
    pub fuel_rate: f64,
    pub cum_fuel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub signal_id: SignalId,
    pub phase: Phase,
    pub remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub vehicles: Vec<VehicleRecord>,
    pub signals: Vec<SignalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Advisory {
        t: f64,
        platoon_id: u32,
        leader: VehicleId,
        v_ref: f64,
        front: Vec<VehicleId>,
        rear: Vec<VehicleId>,
        reason: DecisionReason,
        pending_consensus: bool,
        signal_id: Option<SignalId>,
        window: Option<GreenWindow>,
    },
    Split {
        t: f64,
        platoon_id: u32,
        new_platoon_id: u32,
        pam: PlatoonAwarenessMessage,
    },
    Finished {
        t: f64,
        leader_distance: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub t: f64,
    pub follower: VehicleId,
    pub ahead: VehicleId,
    pub gap: f64,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("collision at t={:.1}s: vehicle {} reached vehicle {} (gap {:.3} m)", .0.t, .0.follower, .0.ahead, .0.gap)]
    Collision(CollisionReport),
    #[error("vehicle {0} state became non-finite")]
    NonFinite(VehicleId),
    #[error("MPC failure: {0}")]
    Mpc(#[from] crate::mpc::MpcError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<TickRecord>,
    pub summary: RunSummary,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone)]
struct Vehicle {
    id: VehicleId,
    state: VehicleState,
    pid: CaccState,
    fuel: FuelAccumulator,
    input: ControlInput,
    travelled: f64,
}

#[derive(Debug, Clone)]
struct Platoon {
    id: u32,
    /// Vehicle indices, leader first.
    members: Vec<usize>,
    consensus: ConsensusState,
    /// Held reference velocity.
    v_ref: f64,
    solver: Option<MpcSolver>,
    /// After a split the rear may not use windows opening before this time
    /// at the given signal.
    blocked: Option<(SignalId, f64)>,
    last_logged: Option<(DecisionReason, usize, bool, f64)>,
}

/// Platoons and the vehicle-to-platoon index.
#[derive(Debug, Clone)]
pub struct PlatoonRegistry {
    platoons: Vec<Platoon>,
    membership: Vec<usize>,
    next_id: u32,
}

impl PlatoonRegistry {
    fn new(platoons: Vec<Platoon>, vehicle_count: usize) -> Self {
        let mut membership = vec![usize::MAX; vehicle_count];
        for (p, platoon) in platoons.iter().enumerate() {
            for &m in &platoon.members {
                membership[m] = p;
            }
        }
        let next_id = platoons.iter().map(|p| p.id + 1).max().unwrap_or(0);
        Self {
            platoons,
            membership,
            next_id,
        }
    }

    pub fn len(&self) -> usize {
        self.platoons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.platoons.is_empty()
    }

    pub fn platoon_id_of(&self, vehicle: usize) -> u32 {
        self.platoons[self.membership[vehicle]].id
    }

    /// Member indices of each platoon, leader first.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        self.platoons.iter().map(|p| p.members.clone()).collect()
    }

    /// Every vehicle appears in exactly one platoon, the index agrees with
    /// the lists, and each platoon is a contiguous run in road order.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![0u32; self.membership.len()];
        for (p, platoon) in self.platoons.iter().enumerate() {
            if platoon.members.is_empty() {
                return false;
            }
            for (k, &m) in platoon.members.iter().enumerate() {
                if m >= seen.len() || self.membership[m] != p {
                    return false;
                }
                seen[m] += 1;
                if k > 0 && m != platoon.members[k - 1] + 1 {
                    return false;
                }
            }
        }
        seen.iter().all(|&c| c == 1)
    }

    fn split(&mut self, p: usize, front_len: usize) -> usize {
        let rear = self.platoons[p].members.split_off(front_len);
        let id = self.next_id;
        self.next_id += 1;
        let q = self.platoons.len();
        for &m in &rear {
            self.membership[m] = q;
        }
        let template = &self.platoons[p];
        self.platoons.push(Platoon {
            id,
            members: rear,
            consensus: ConsensusState::default(),
            v_ref: 0.0,
            solver: template.solver.clone(),
            blocked: None,
            last_logged: None,
        });
        q
    }
}

/// Number of maximal runs with `v < 0.1` lasting at least 0.5 s.
pub fn count_stops(speeds: &[f64], dt: f64) -> u32 {
    let min_ticks = (0.5 / dt - 1e-9).ceil() as usize;
    let mut stops = 0;
    let mut run = 0usize;
    for &v in speeds {
        if v < STANDSTILL_SPEED {
            run += 1;
            if run == min_ticks {
                stops += 1;
            }
        } else {
            run = 0;
        }
    }
    stops
}

/// What a vehicle knows about the signal ahead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalView {
    /// Nothing within sight or radio range.
    None,
    /// Only the lamp currently shown.
    Visible(Phase),
    /// Phase plus timing, with the start of the next green.
    Timed {
        phase: Phase,
        remaining: f64,
        time_to_green: f64,
    },
}

/// Traction cap that brings the vehicle to rest `standoff` short of the
/// line when it cannot pass legally, or `None` when it may proceed.
pub fn stop_line_guard(
    v: f64,
    d_line: f64,
    view: SignalView,
    guard: &GuardConfig,
    params: &VehicleParams,
) -> Option<f64> {
    let must_stop = match view {
        SignalView::None => false,
        SignalView::Visible(phase) => !phase.is_passable(),
        SignalView::Timed {
            phase,
            remaining,
            time_to_green,
        } => match phase {
            Phase::Green => false,
            Phase::Amber if d_line <= v * remaining => false,
            _ => {
                // arriving no earlier than the green at the current speed
                let eta = if v > 0.1 { d_line / v } else { f64::INFINITY };
                !(eta >= time_to_green && v > 0.1)
            }
        },
    };
    if !must_stop {
        return None;
    }
    let d_eff = d_line - guard.standoff;
    if d_eff <= 0.0 || (v < 0.5 && d_eff < 3.0) {
        return Some(params.u_min);
    }
    if v * v >= 2.0 * guard.comfort_decel * d_eff {
        let decel = v * v / (2.0 * d_eff);
        return Some((params.resistance(v) - decel).max(params.u_min));
    }
    None
}

/// Amber without timing: the driver proceeds only if already too close to
/// stop at 3 m/s².
fn amber_must_stop(v: f64, d_line: f64, params: &VehicleParams) -> bool {
    d_line > v * v / (2.0 * (-params.u_min).min(3.0))
}

/// Speed cap behind a vehicle `gap` metres ahead travelling at `v_ahead`.
fn headway_cap(v: f64, v_ahead: f64, gap: f64, cfg: &CaccConfig, guard: &GuardConfig, params: &VehicleParams) -> f64 {
    let target = cacc::target_velocity(v_ahead, v_ahead, gap, v, cfg);
    let mut cap = (target - v) / guard.headway_tau + params.resistance(v);
    if v > v_ahead {
        let room = (gap - 2.0).max(0.1);
        let closing = v - v_ahead;
        cap = cap.min(params.resistance(v) - closing * closing / (2.0 * room));
    }
    cap.max(params.u_min)
}

/// What a follower knows from its predecessor's and leader's PCMs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowerView {
    pub v: f64,
    pub v_preceding: f64,
    pub v_leader: f64,
    /// Bumper-to-bumper gap to the predecessor.
    pub gap: f64,
}

/// CACC target speed tracked by the scheduled PID, plus a feed-forward
/// term cancelling drag and rolling resistance, capped by the headway guard.
pub fn follower_accel(view: FollowerView, pid: CaccState, cfg: &ScenarioConfig) -> (f64, CaccState) {
    let cacc_cfg = cfg.cacc_config();
    let target = cacc::target_velocity(view.v_preceding, view.v_leader, view.gap, view.v, &cacc_cfg);
    let (u_pid, pid) = cacc::pid_accel(target, view.v, pid, cfg.dt, &cacc_cfg);
    let u = (u_pid + cfg.vehicle.resistance(view.v)).min(headway_cap(
        view.v,
        view.v_preceding,
        view.gap,
        &cacc_cfg,
        &cfg.guard,
        &cfg.vehicle,
    ));
    (u.clamp(cfg.vehicle.u_min, cfg.vehicle.u_max), pid)
}

/// Longitudinal and lateral control for a vehicle driving on its own
/// toward `v_target`, followed by the guards.
#[allow(clippy::too_many_arguments)]
pub fn baseline_policy(
    state: &VehicleState,
    pid: CaccState,
    ahead: Option<(f64, f64)>,
    d_line: Option<f64>,
    phase: Option<Phase>,
    route: &Route,
    cfg: &ScenarioConfig,
) -> (ControlInput, CaccState) {
    let cacc_cfg = cfg.cacc_config();
    let v = state.v;
    let v_limit = cfg.vehicle.v_max;
    let target = match ahead {
        Some((gap, v_ahead)) => cacc::target_velocity(v_ahead, v_ahead, gap, v, &cacc_cfg).min(v_limit),
        None => v_limit,
    };
    let (u_pid, pid) = cacc::pid_accel(target, v, pid, cfg.dt, &cacc_cfg);
    let mut u = (u_pid + cfg.vehicle.resistance(v)).clamp(cfg.vehicle.u_min, cfg.vehicle.u_max);
    if let Some((gap, v_ahead)) = ahead {
        u = u.min(headway_cap(v, v_ahead, gap, &cacc_cfg, &cfg.guard, &cfg.vehicle));
    }
    if let (Some(d), Some(phase)) = (d_line, phase) {
        let view = if d <= cfg.guard.sight_range {
            match phase {
                Phase::Amber if !amber_must_stop(v, d, &cfg.vehicle) => SignalView::Visible(Phase::Green),
                Phase::Amber => SignalView::Visible(Phase::Red),
                p => SignalView::Visible(p),
            }
        } else {
            SignalView::None
        };
        if let Some(cap) = stop_line_guard(v, d, view, &cfg.guard, &cfg.vehicle) {
            u = u.min(cap);
        }
    }
    let delta = cacc::pure_pursuit(state, route, cfg.guard.lookahead, &cfg.vehicle);
    (ControlInput::new(u, delta), pid)
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    route: Route,
    controllers: Vec<SignalController>,
    cacc_cfg: CaccConfig,
    limits: AdvisoryLimits,
    settings: AdvisorySettings,
    vehicles: Vec<Vehicle>,
    registry: PlatoonRegistry,
    rng: ChaCha8Rng,
    events: Vec<Event>,
}

struct LeaderPlan {
    decision: crate::advisory::AdvisoryDecision,
    window: Option<(SignalId, GreenWindow)>,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let route = cfg.build_route()?;
        let controllers = cfg.build_controllers()?;
        let spacing = cfg.vehicle_length + cfg.spawn_gap;
        let vehicles: Vec<Vehicle> = (0..cfg.vehicle_count)
            .map(|i| {
                let s = route.wrap_s(-(i as f64) * spacing);
                let (x, y) = route.point_at(s, 0.0);
                let psi = wrap_angle(crate::dynamics::PathHeading::heading(&route, s));
                Vehicle {
                    id: VehicleId(i as u32),
                    state: VehicleState {
                        x,
                        y,
                        psi,
                        v: 0.0,
                        cte: 0.0,
                        epsi: 0.0,
                        arc_s: s,
                        vehicle_length: cfg.vehicle_length,
                    },
                    pid: CaccState::default(),
                    fuel: FuelAccumulator::default(),
                    input: ControlInput::default(),
                    // front-bumper distance from the leader's spawn point
                    travelled: -(i as f64) * spacing,
                }
            })
            .collect();

        let solver = MpcSolver::new(cfg.mpc_config(), cfg.vehicle)?;
        let v_limit = cfg.vehicle.v_max;
        let platoons = match cfg.mode {
            Mode::Advisory => vec![Platoon {
                id: 0,
                members: (0..cfg.vehicle_count).collect(),
                consensus: ConsensusState::default(),
                // a platoon at rest holds its current (zero) speed until advised
                v_ref: 0.0,
                solver: Some(solver),
                blocked: None,
                last_logged: None,
            }],
            Mode::Baseline => (0..cfg.vehicle_count)
                .map(|i| Platoon {
                    id: i as u32,
                    members: vec![i],
                    consensus: ConsensusState::default(),
                    v_ref: v_limit,
                    solver: None,
                    blocked: None,
                    last_logged: None,
                })
                .collect(),
        };
        Ok(Self {
            cfg,
            registry: PlatoonRegistry::new(platoons, cfg.vehicle_count),
            route,
            controllers,
            cacc_cfg: cfg.cacc_config(),
            limits: cfg.advisory_limits(),
            settings: cfg.advisory_settings(),
            vehicles,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            events: Vec::new(),
        })
    }

    fn controller(&self, id: SignalId) -> &SignalController {
        self.controllers
            .iter()
            .find(|c| c.signal_id == id)
            .expect("every site has a controller")
    }

    /// Bumper-to-bumper gap from vehicle `i` to the one ahead of it.
    fn gap_ahead(&self, i: usize) -> Option<(f64, f64)> {
        if i == 0 {
            return None;
        }
        let ahead = &self.vehicles[i - 1];
        let gap = ahead.travelled - self.vehicles[i].travelled - ahead.state.vehicle_length;
        Some((gap, ahead.state.v))
    }

    /// SPaT for the signal ahead of `arc_s`, if within radio range and not
    /// dropped.
    fn receive_spat(&mut self, arc_s: f64, now: f64) -> Option<(SignalId, f64, SpatMessage)> {
        let (site, d) = self.route.next_signal(arc_s)?;
        let received = in_range(self.cfg.advisory.dsrc_range, arc_s, site.arc_s, self.route.length()).unwrap_or(false);
        if !received {
            return None;
        }
        let p = self.cfg.advisory.spat_loss_probability;
        if p > 0.0 && self.rng.gen::<f64>() < p {
            return None;
        }
        Some((site.signal_id, d, self.controller(site.signal_id).spat(now)))
    }

    /// First upcoming green window the platoon can reach at or below the
    /// speed limit, shrunk by the planning margins.
    fn choose_window(&self, spat: &SpatMessage, d: f64, now: f64, blocked_until: Option<f64>) -> Option<GreenWindow> {
        let a = &self.cfg.advisory;
        let windows = spat.green_windows(now).ok()?;
        windows.take(a.window_lookahead).find_map(|w| {
            if blocked_until.is_some_and(|b| w.t_g_start < b - 1e-9) {
                return None;
            }
            let start = if w.t_g_start > now {
                w.t_g_start + a.window_start_margin
            } else {
                w.t_g_start
            };
            let end = w.t_g_end - a.window_end_margin;
            if end <= start.max(now) {
                return None;
            }
            (d / (end - now) <= self.limits.v_limit).then_some(GreenWindow {
                t_g_start: start,
                t_g_end: end,
            })
        })
    }

    fn snapshot(&self, p: usize, now: f64) -> PlatoonSnapshot {
        let members = &self.registry.platoons[p].members;
        let pcms: Vec<PlatoonControlMessage> = members
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let v = &self.vehicles[i];
                let gap = if k == 0 {
                    0.0
                } else {
                    self.gap_ahead(i).map_or(0.0, |g| g.0.max(0.0))
                };
                PlatoonControlMessage {
                    vehicle_id: v.id,
                    position_along_route: v.state.arc_s,
                    velocity: v.state.v,
                    vehicle_length: v.state.vehicle_length,
                    gap_to_predecessor: gap,
                    timestamp: now,
                }
            })
            .collect();
        PlatoonSnapshot::from_pcms(&pcms).expect("platoons are never empty")
    }

    fn plan_leader(&mut self, p: usize, now: f64) -> LeaderPlan {
        let leader = self.registry.platoons[p].members[0];
        let arc_s = self.vehicles[leader].state.arc_s;
        let snapshot = self.snapshot(p, now);
        let spat = self.receive_spat(arc_s, now);
        let platoon = &self.registry.platoons[p];
        let (window, d_tl) = match &spat {
            Some((id, d, msg)) => {
                let blocked = platoon.blocked.filter(|(b, _)| b == id).map(|(_, t)| t);
                (self.choose_window(msg, *d, now, blocked).map(|w| (*id, w)), *d)
            }
            None => (None, 0.0),
        };
        let input = CoordinationInput {
            snapshot: &snapshot,
            d_tl,
            window: window.map(|w| w.1),
            v_current: platoon.v_ref,
            now,
            limits: &self.limits,
            settings: &self.settings,
        };
        let (decision, consensus) = coordinate(input, platoon.consensus);
        let platoon = &mut self.registry.platoons[p];
        platoon.consensus = consensus;
        platoon.v_ref = decision.v_ref.min(self.limits.v_limit);
        if let Some((id, _, _)) = &spat {
            if platoon.blocked.is_some_and(|(b, _)| b != *id) {
                platoon.blocked = None;
            }
        }
        LeaderPlan { decision, window }
    }

    fn log_decision(&mut self, p: usize, plan: &LeaderPlan, now: f64) {
        let d = &plan.decision;
        let key = (d.reason, d.front.len(), d.pending_consensus, d.v_ref);
        let platoon = &self.registry.platoons[p];
        let changed = match platoon.last_logged {
            None => true,
            Some((reason, front, pending, v)) => {
                reason != key.0 || front != key.1 || pending != key.2 || (v - key.3).abs() >= 0.1
            }
        };
        if !changed {
            return;
        }
        self.events.push(Event::Advisory {
            t: now,
            platoon_id: platoon.id,
            leader: self.vehicles[platoon.members[0]].id,
            v_ref: d.v_ref,
            front: d.front.clone(),
            rear: d.rear.clone(),
            reason: d.reason,
            pending_consensus: d.pending_consensus,
            signal_id: plan.window.map(|w| w.0),
            window: plan.window.map(|w| w.1),
        });
        self.registry.platoons[p].last_logged = Some(key);
    }

    /// Stop-line view for a vehicle that may hold SPaT.
    fn signal_view(&mut self, i: usize, now: f64) -> Option<(f64, SignalView)> {
        let arc_s = self.vehicles[i].state.arc_s;
        let (site, d) = self.route.next_signal(arc_s)?;
        let v = self.vehicles[i].state.v;
        if self.cfg.mode == Mode::Advisory {
            if let Some((_, _, spat)) = self.receive_spat(arc_s, now) {
                let time_to_green = spat
                    .green_windows(now)
                    .ok()
                    .and_then(|mut w| w.next())
                    .map_or(f64::INFINITY, |w| w.t_g_start - now);
                return Some((
                    d,
                    SignalView::Timed {
                        phase: spat.phase,
                        remaining: spat.phase_remaining,
                        time_to_green,
                    },
                ));
            }
        }
        if d > self.cfg.guard.sight_range {
            return Some((d, SignalView::None));
        }
        let (phase, _) = self.controller(site.signal_id).phase_at(now);
        let phase = match phase {
            Phase::Amber if !amber_must_stop(v, d, &self.cfg.vehicle) => Phase::Green,
            Phase::Amber => Phase::Red,
            p => p,
        };
        Some((d, SignalView::Visible(phase)))
    }

    fn apply_guards(&mut self, i: usize, mut u: f64, now: f64) -> f64 {
        let v = self.vehicles[i].state.v;
        if let Some((d, view)) = self.signal_view(i, now) {
            if let Some(cap) = stop_line_guard(v, d, view, &self.cfg.guard, &self.cfg.vehicle) {
                u = u.min(cap);
            }
        }
        u
    }

    fn advisory_controls(&mut self, now: f64) -> Result<Vec<LeaderPlan>, EngineError> {
        let mut plans = Vec::with_capacity(self.registry.len());
        for p in 0..self.registry.len() {
            let plan = self.plan_leader(p, now);
            self.log_decision(p, &plan, now);
            let leader = self.registry.platoons[p].members[0];
            let v_ref = self.registry.platoons[p].v_ref;
            let state = self.vehicles[leader].state;
            let solver = self.registry.platoons[p]
                .solver
                .as_mut()
                .expect("advisory platoons carry a solver");
            let control = solver.solve(&state, v_ref, &self.route)?.first_control();
            let mut u = control.u;
            if let Some((gap, v_ahead)) = self.gap_ahead(leader).filter(|g| g.0 < GAP_GUARD_RANGE) {
                u = u.min(headway_cap(
                    state.v,
                    v_ahead,
                    gap,
                    &self.cacc_cfg,
                    &self.cfg.guard,
                    &self.cfg.vehicle,
                ));
            }
            let u = self.apply_guards(leader, u, now);
            self.vehicles[leader].input = ControlInput::new(u, control.delta).clamped(&self.cfg.vehicle);
            plans.push(plan);
        }

        for p in 0..self.registry.len() {
            let members = self.registry.platoons[p].members.clone();
            let v_leader = self.vehicles[members[0]].state.v;
            for &i in &members[1..] {
                let (gap, v_pred) = self.gap_ahead(i).expect("followers have a predecessor");
                let v = self.vehicles[i].state.v;
                let (u, pid) = follower_accel(
                    FollowerView {
                        v,
                        v_preceding: v_pred,
                        v_leader,
                        gap,
                    },
                    self.vehicles[i].pid,
                    self.cfg,
                );
                let u = self.apply_guards(i, u, now);
                let delta = cacc::pure_pursuit(
                    &self.vehicles[i].state,
                    &self.route,
                    self.cfg.guard.lookahead,
                    &self.cfg.vehicle,
                );
                self.vehicles[i].pid = pid;
                self.vehicles[i].input = ControlInput::new(u, delta).clamped(&self.cfg.vehicle);
            }
        }
        Ok(plans)
    }

    fn baseline_controls(&mut self, now: f64) {
        for i in 0..self.vehicles.len() {
            let ahead = self.gap_ahead(i);
            let state = self.vehicles[i].state;
            let next = self.route.next_signal(state.arc_s);
            let d_line = next.map(|(_, d)| d);
            let phase = next.map(|(site, _)| self.controller(site.signal_id).phase_at(now).0);
            let (input, pid) = baseline_policy(
                &state,
                self.vehicles[i].pid,
                ahead,
                d_line,
                phase,
                &self.route,
                self.cfg,
            );
            self.vehicles[i].pid = pid;
            self.vehicles[i].input = input.clamped(&self.cfg.vehicle);
        }
    }

    fn step_all(&mut self) -> Result<(), EngineError> {
        let dt = self.cfg.dt;
        for veh in &mut self.vehicles {
            // no input may carry the vehicle past the speed limit in one step
            let v_max = self.cfg.vehicle.v_max;
            let governor = self.cfg.vehicle.resistance(veh.state.v) + (v_max - veh.state.v) / dt;
            veh.input.u = veh.input.u.min(governor).max(self.cfg.vehicle.u_min);
            let before = veh.state;
            let a_net = net_acceleration(before.v, veh.input.u, &self.cfg.vehicle);
            let rate = fuel_rate(before.v, a_net, veh.input.u, &self.cfg.fuel);
            let mut next = step(&before, veh.input, dt, &self.cfg.vehicle, &self.route);
            let proj = self.route.project(next.x, next.y);
            next.arc_s = proj.arc_s;
            next.cte = proj.cte;
            next.epsi = wrap_angle(next.psi - proj.path_heading);
            if !next.is_finite() {
                return Err(EngineError::NonFinite(veh.id));
            }
            let mut advance = (next.arc_s - before.arc_s).rem_euclid(self.route.length());
            if advance > self.route.length() / 2.0 {
                advance -= self.route.length();
            }
            veh.travelled += advance;
            veh.state = next;
            veh.fuel = veh.fuel.accumulate(rate, dt);
        }
        Ok(())
    }

    fn check_collisions(&self, t: f64) -> Result<(), EngineError> {
        for i in 1..self.vehicles.len() {
            let (gap, _) = self.gap_ahead(i).expect("has predecessor");
            if gap <= 0.0 {
                return Err(EngineError::Collision(CollisionReport {
                    t,
                    follower: self.vehicles[i].id,
                    ahead: self.vehicles[i - 1].id,
                    gap,
                }));
            }
        }
        Ok(())
    }

    fn execute_splits(&mut self, plans: &[LeaderPlan], now: f64) {
        for (p, plan) in plans.iter().enumerate() {
            let d = &plan.decision;
            if !d.is_split() || d.pending_consensus {
                continue;
            }
            let snapshot = self.snapshot(p, now);
            let leader_v = self.vehicles[self.registry.platoons[p].members[0]].state.v.max(0.1);
            let d_tl = plan
                .window
                .and_then(|(id, _)| {
                    self.route
                        .distance_to_signal(self.vehicles[self.registry.platoons[p].members[0]].state.arc_s, id)
                        .ok()
                })
                .unwrap_or(0.0);
            let q = self.registry.split(p, d.front.len());
            let rear_leader = self.registry.platoons[q].members[0];
            let rear = &mut self.registry.platoons[q];
            rear.v_ref = self.vehicles[rear_leader].state.v;
            rear.blocked = plan
                .window
                .map(|(id, w)| (id, w.t_g_end + self.cfg.advisory.window_end_margin));
            if let Some(s) = rear.solver.as_mut() {
                s.reset();
            }
            let pam = PlatoonAwarenessMessage {
                leader_id: self.vehicles[self.registry.platoons[p].members[0]].id,
                platoon_size: snapshot.len(),
                platoon_length: snapshot.d_platoon(),
                predicted_arrival_time: now + d_tl / leader_v,
                split_decision: Some(SplitDecision {
                    front_ids: d.front.clone(),
                    rear_ids: d.rear.clone(),
                }),
                timestamp: now,
            };
            log::info!(
                "t={now:.1} platoon {} split: front {:?} rear {:?}",
                self.registry.platoons[p].id,
                d.front,
                d.rear
            );
            self.events.push(Event::Split {
                t: now,
                platoon_id: self.registry.platoons[p].id,
                new_platoon_id: self.registry.platoons[q].id,
                pam,
            });
        }
    }

    fn record(&self, t: f64) -> TickRecord {
        TickRecord {
            t,
            vehicles: self
                .vehicles
                .iter()
                .enumerate()
                .map(|(i, v)| VehicleRecord {
                    vehicle_id: v.id,
                    platoon_id: self.registry.platoon_id_of(i),
                    arc_s: v.state.arc_s,
                    x: v.state.x,
                    y: v.state.y,
                    v: v.state.v,
                    u: v.input.u,
                    delta: v.input.delta,
                    fuel_rate: v.fuel.last_rate,
                    cum_fuel: v.fuel.cumulative,
                })
                .collect(),
            signals: self
                .controllers
                .iter()
                .map(|c| {
                    let (phase, remaining) = c.phase_at(t);
                    SignalRecord {
                        signal_id: c.signal_id,
                        phase,
                        remaining,
                    }
                })
                .collect(),
        }
    }
}

/// `k · dt` rounded to the nanosecond so printed times stay short.
fn tick_time(k: u64, dt: f64) -> f64 {
    (k as f64 * dt * 1e9).round() / 1e9
}

/// Runs a scenario to completion.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput, EngineError> {
    run_observed(config, |_, _| {})
}

/// Like [`run`], calling `observe(registry, split_happened)` after every tick.
pub fn run_observed(
    config: &ScenarioConfig,
    mut observe: impl FnMut(&PlatoonRegistry, bool),
) -> Result<RunOutput, EngineError> {
    let mut sim = Sim::new(config)?;
    let target = config.laps as f64 * sim.route.length() - 5.0;
    let max_ticks = (config.max_time / config.dt).round() as u64;
    let mut records = Vec::new();

    for k in 0..max_ticks {
        let now = tick_time(k, config.dt);
        let plans = match config.mode {
            Mode::Advisory => sim.advisory_controls(now)?,
            Mode::Baseline => {
                sim.baseline_controls(now);
                Vec::new()
            }
        };
        sim.step_all()?;
        let t = tick_time(k + 1, config.dt);
        sim.check_collisions(t)?;
        let before = sim.registry.len();
        sim.execute_splits(&plans, now);
        observe(&sim.registry, sim.registry.len() != before);
        records.push(sim.record(t));
        if sim.vehicles[0].travelled >= target {
            break;
        }
    }

    let t_end = records.last().map_or(0.0, |r| r.t);
    let leader_distance = sim.vehicles[0].travelled;
    sim.events.push(Event::Finished {
        t: t_end,
        leader_distance,
    });
    let summary = RunSummary::from_run(config, &records, &sim.events, leader_distance / sim.route.length());
    Ok(RunOutput {
        records,
        summary,
        events: sim.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(v: f64) -> VehicleState {
        VehicleState {
            x: 0.0,
            y: 0.0,
            psi: 0.0,
            v,
            cte: 0.0,
            epsi: 0.0,
            arc_s: 0.0,
            vehicle_length: 4.5,
        }
    }

    #[test]
    fn stop_counting_examples() {
        assert_eq!(count_stops(&[10.0; 100], 0.1), 0);
        let mut one = vec![10.0; 20];
        one.extend([0.0; 30]);
        one.extend([10.0; 20]);
        assert_eq!(count_stops(&one, 0.1), 1);
        let mut two = vec![0.0; 10];
        two.extend([1.0; 5]);
        two.extend([0.05; 10]);
        assert_eq!(count_stops(&two, 0.1), 2);
        // 0.4 s below threshold is not a stop
        assert_eq!(count_stops(&[5.0, 0.0, 0.0, 0.0, 0.0, 5.0], 0.1), 0);
        assert_eq!(count_stops(&[5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0], 0.1), 1);
    }

    #[test]
    fn baseline_brakes_for_red_fifty_metres_ahead() {
        let cfg = ScenarioConfig::default();
        let route = cfg.build_route().unwrap();
        let v = 13.89;
        let (input, _) = baseline_policy(
            &at(v),
            CaccState::default(),
            None,
            Some(50.0),
            Some(Phase::Red),
            &route,
            &cfg,
        );
        let decel = v * v / (2.0 * (50.0 - cfg.guard.standoff));
        assert!(decel <= 3.0);
        let a_net = net_acceleration(v, input.u, &cfg.vehicle);
        assert!((a_net + decel).abs() < 1e-9, "a_net={a_net} decel={decel}");
    }

    #[test]
    fn baseline_holds_limit_on_green() {
        let cfg = ScenarioConfig::default();
        let route = cfg.build_route().unwrap();
        let v = cfg.vehicle.v_max;
        let (input, _) = baseline_policy(
            &at(v),
            CaccState::default(),
            None,
            Some(50.0),
            Some(Phase::Green),
            &route,
            &cfg,
        );
        assert!(net_acceleration(v, input.u, &cfg.vehicle).abs() < 1e-9);
    }

    #[test]
    fn guard_respects_timing() {
        let g = GuardConfig::default();
        let p = VehicleParams::default();
        // red, but at this speed the line is reached after it turns green
        let view = SignalView::Timed {
            phase: Phase::Red,
            remaining: 5.0,
            time_to_green: 5.0,
        };
        assert_eq!(stop_line_guard(10.0, 60.0, view, &g, &p), None);
        assert!(stop_line_guard(10.0, 40.0, view, &g, &p).is_some());
        // amber that can be cleared before red
        let amber = SignalView::Timed {
            phase: Phase::Amber,
            remaining: 2.0,
            time_to_green: 22.0,
        };
        assert_eq!(stop_line_guard(13.0, 20.0, amber, &g, &p), None);
        // stopped at the line: held
        assert_eq!(
            stop_line_guard(0.0, 1.5, SignalView::Visible(Phase::Red), &g, &p),
            Some(p.u_min)
        );
        // far away: no braking yet
        assert_eq!(
            stop_line_guard(5.0, 90.0, SignalView::Visible(Phase::Red), &g, &p),
            None
        );
    }

    #[test]
    fn stopped_at_red_restarts_with_one_stop() {
        let mut cfg = ScenarioConfig {
            mode: Mode::Baseline,
            vehicle_count: 1,
            laps: 1,
            ..Default::default()
        };
        // single signal turning red just as the vehicle approaches
        cfg.route.signals.truncate(1);
        cfg.route.signals[0].arc_s = 120.0;
        cfg.route.signals[0].phase_offset = 0.0;
        cfg.route.signals[0].cycle_plan = vec![
            PhaseSpan::new(Phase::Green, 5.0),
            PhaseSpan::new(Phase::Amber, 3.0),
            PhaseSpan::new(Phase::Red, 20.0),
        ];
        let out = run(&cfg).unwrap();
        assert_eq!(out.summary.leader_stops, 1);
        assert!(out.summary.laps_completed >= 1.0 - 5.0 / 800.0);
    }

    #[test]
    fn validation_names_field() {
        let cfg = ScenarioConfig {
            vehicle_count: 0,
            ..Default::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "vehicle_count");
        let cfg = ScenarioConfig {
            spawn_gap: 5.0,
            ..Default::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "spawn_gap");
        let mut cfg = ScenarioConfig::default();
        cfg.vehicle.mass = -1.0;
        assert_eq!(cfg.validate().unwrap_err().field, "vehicle.mass");
        let mut cfg = ScenarioConfig::default();
        cfg.route.signals[1].phase_offset = 100.0;
        assert_eq!(cfg.validate().unwrap_err().field, "route.signals[1]");
        assert!(ScenarioConfig::default().validate().is_ok());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), cfg);
        assert!(ScenarioConfig::from_toml("vehicle_count = 3\nbogus = 1\n").is_err());
    }

    #[test]
    fn registry_split_keeps_partition() {
        let platoon = Platoon {
            id: 0,
            members: (0..6).collect(),
            consensus: ConsensusState::default(),
            v_ref: 0.0,
            solver: None,
            blocked: None,
            last_logged: None,
        };
        let mut reg = PlatoonRegistry::new(vec![platoon], 6);
        assert!(reg.is_partition());
        let q = reg.split(0, 4);
        assert_eq!(reg.partition(), vec![vec![0, 1, 2, 3], vec![4, 5]]);
        assert_eq!(reg.platoon_id_of(5), reg.platoons[q].id);
        assert!(reg.is_partition());
        reg.platoons[1].members.push(0);
        assert!(!reg.is_partition());
    }
}
