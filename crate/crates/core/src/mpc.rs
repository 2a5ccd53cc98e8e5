//! Nonlinear MPC for platoon leaders.
//!
//! Single shooting over the control sequence: the dynamics are enforced by
//! rolling out [`dynamics::step`], so every predicted state is consistent
//! with the controls by construction. The cost gradient is computed with a
//! reverse (adjoint) sweep through the rollout and minimised with a
//! spectral projected-gradient method, which keeps every control inside its
//! box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, ControlInput, PathHeading, VehicleParams, VehicleState};

#[derive(Debug, Error, PartialEq)]
pub enum MpcError {
    #[error("non-finite vehicle state passed to solver")]
    NonFiniteState,
    #[error("reference velocity {0} is not finite")]
    BadReference(f64),
    #[error("state/control length mismatch: {states} states for {controls} controls")]
    LengthMismatch { states: usize, controls: usize },
    #[error("invalid MPC config field {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Number of predicted states, including the current one.
    pub horizon: usize,
    pub dt: f64,
    pub w_cte: f64,
    pub w_epsi: f64,
    pub w_v: f64,
    pub w_ddelta: f64,
    pub w_da: f64,
    /// Weight on max(u, 0)², penalising fuel-intensive traction.
    pub w_accel_pos: f64,
    pub asymmetric: bool,
    /// Exact-penalty weight keeping predicted speed within `v_bounds`.
    pub w_speed_bound: f64,
    #[serde(skip)]
    pub v_bounds: [f64; 2],
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this.
    pub tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.25,
            w_cte: 2.0,
            w_epsi: 2.0,
            w_v: 1.0,
            w_ddelta: 100.0,
            w_da: 10.0,
            w_accel_pos: 0.5,
            asymmetric: true,
            w_speed_bound: 100.0,
            v_bounds: [0.0, 13.89],
            max_iterations: 200,
            tolerance: 1e-9,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |field, reason: String| Err(MpcError::InvalidConfig { field, reason });
        if self.horizon < 2 {
            return bad("horizon", format!("{} < 2", self.horizon));
        }
        if !(self.dt > 0.0) {
            return bad("dt", format!("{} must be positive", self.dt));
        }
        let weights = [
            ("w_cte", self.w_cte),
            ("w_epsi", self.w_epsi),
            ("w_v", self.w_v),
            ("w_ddelta", self.w_ddelta),
            ("w_da", self.w_da),
            ("w_accel_pos", self.w_accel_pos),
            ("w_speed_bound", self.w_speed_bound),
        ];
        for (field, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return bad(field, format!("{w} must be a finite nonnegative weight"));
            }
        }
        if self.max_iterations == 0 {
            return bad("max_iterations", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn with_vehicle_limits(mut self, params: &VehicleParams) -> Self {
        self.v_bounds = [params.v_min, params.v_max];
        self
    }

    fn accel_weight(&self) -> f64 {
        if self.asymmetric {
            self.w_accel_pos
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpcSolution {
    pub controls: Vec<ControlInput>,
    pub predicted_states: Vec<VehicleState>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl MpcSolution {
    /// The actuation command for the current tick.
    pub fn first_control(&self) -> ControlInput {
        self.controls[0]
    }
}

/// Total cost of a predicted trajectory: path tracking, speed tracking,
/// control smoothness, positive-traction penalty and the soft speed bound.
pub fn evaluate_cost(
    states: &[VehicleState],
    controls: &[ControlInput],
    v_ref: f64,
    config: &MpcConfig,
) -> Result<f64, MpcError> {
    if states.len() != controls.len() + 1 {
        return Err(MpcError::LengthMismatch {
            states: states.len(),
            controls: controls.len(),
        });
    }
    let [v_lo, v_hi] = config.v_bounds;
    let mut cost = 0.0;
    for s in states {
        let over = (s.v - v_hi).max(0.0);
        let under = (v_lo - s.v).max(0.0);
        cost += config.w_cte * s.cte * s.cte
            + config.w_epsi * s.epsi * s.epsi
            + config.w_v * (v_ref - s.v) * (v_ref - s.v)
            + config.w_speed_bound * (over * over + under * under);
    }
    for w in controls.windows(2) {
        let dd = w[1].delta - w[0].delta;
        let du = w[1].u - w[0].u;
        cost += config.w_ddelta * dd * dd + config.w_da * du * du;
    }
    let wa = config.accel_weight();
    for c in controls {
        let pos = c.u.max(0.0);
        cost += wa * pos * pos;
    }
    Ok(cost)
}

/// Predicted states for `controls` starting at `start`.
pub fn rollout(
    start: &VehicleState,
    controls: &[ControlInput],
    dt: f64,
    params: &VehicleParams,
    path: &impl PathHeading,
) -> Vec<VehicleState> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    rollout_into(start, controls, dt, params, path, &mut states);
    states
}

fn rollout_into(
    start: &VehicleState,
    controls: &[ControlInput],
    dt: f64,
    params: &VehicleParams,
    path: &impl PathHeading,
    out: &mut Vec<VehicleState>,
) {
    out.clear();
    out.push(*start);
    let mut s = *start;
    for &c in controls {
        s = dynamics::step(&s, c, dt, params, path);
        out.push(s);
    }
}

/// Cost and its gradient with respect to the control sequence, laid out as
/// `[u_0, δ_0, u_1, δ_1, ...]`.
pub fn cost_and_gradient(
    start: &VehicleState,
    controls: &[ControlInput],
    v_ref: f64,
    config: &MpcConfig,
    params: &VehicleParams,
    path: &impl PathHeading,
) -> (f64, Vec<f64>) {
    let states = rollout(start, controls, config.dt, params, path);
    let mut grad = vec![0.0; 2 * controls.len()];
    let cost = adjoint(&states, controls, v_ref, config, params, path, &mut grad);
    (cost, grad)
}

#[derive(Clone, Copy, Default)]
struct Costate {
    v: f64,
    cte: f64,
    epsi: f64,
    s: f64,
}

fn stage_gradient(s: &VehicleState, v_ref: f64, config: &MpcConfig) -> Costate {
    let [v_lo, v_hi] = config.v_bounds;
    let over = (s.v - v_hi).max(0.0);
    let under = (v_lo - s.v).max(0.0);
    Costate {
        v: -2.0 * config.w_v * (v_ref - s.v) + 2.0 * config.w_speed_bound * (over - under),
        cte: 2.0 * config.w_cte * s.cte,
        epsi: 2.0 * config.w_epsi * s.epsi,
        s: 0.0,
    }
}

fn adjoint(
    states: &[VehicleState],
    controls: &[ControlInput],
    v_ref: f64,
    config: &MpcConfig,
    params: &VehicleParams,
    path: &impl PathHeading,
    grad: &mut [f64],
) -> f64 {
    let cost = evaluate_cost(states, controls, v_ref, config).expect("rollout length");
    let dt = config.dt;
    let k_drag = params.drag_per_mass();
    let n = controls.len();

    let mut lam = stage_gradient(&states[n], v_ref, config);
    for k in (0..n).rev() {
        let z = &states[k];
        let c = controls[k];
        let (sin_e, cos_e) = z.epsi.sin_cos();
        let s_next = z.arc_s + z.v * cos_e * dt;
        let h_now = path.heading_rate(z.arc_s);
        let h_next = path.heading_rate(s_next);
        let clamped = z.v + dynamics::net_acceleration(z.v, c.u, params) * dt < 0.0;

        let dv_dv = if clamped { 0.0 } else { 1.0 - 2.0 * k_drag * z.v * dt };
        let dv_du = if clamped { 0.0 } else { dt };

        grad[2 * k] = lam.v * dv_du;
        grad[2 * k + 1] = lam.epsi * z.v / params.l_f * dt;

        let stage = stage_gradient(z, v_ref, config);
        let prev = Costate {
            v: stage.v
                + lam.v * dv_dv
                + lam.cte * sin_e * dt
                + lam.s * cos_e * dt
                + lam.epsi * (c.delta / params.l_f * dt - h_next * cos_e * dt),
            cte: stage.cte + lam.cte,
            epsi: stage.epsi + lam.cte * z.v * cos_e * dt - lam.s * z.v * sin_e * dt
                + lam.epsi * (1.0 + h_next * z.v * sin_e * dt),
            s: stage.s + lam.s + lam.epsi * (h_now - h_next),
        };
        lam = prev;
    }

    // smoothness and traction terms act on the controls directly
    for k in 0..n {
        if k + 1 < n {
            let dd = controls[k + 1].delta - controls[k].delta;
            let du = controls[k + 1].u - controls[k].u;
            grad[2 * k] -= 2.0 * config.w_da * du;
            grad[2 * k + 2] += 2.0 * config.w_da * du;
            grad[2 * k + 1] -= 2.0 * config.w_ddelta * dd;
            grad[2 * k + 3] += 2.0 * config.w_ddelta * dd;
        }
        grad[2 * k] += 2.0 * config.accel_weight() * controls[k].u.max(0.0);
    }
    cost
}

/// Per-vehicle solver holding scratch buffers and the previous solution
/// for warm starting.
#[derive(Debug, Clone)]
pub struct MpcSolver {
    config: MpcConfig,
    params: VehicleParams,
    previous: Option<Vec<ControlInput>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    states: Vec<VehicleState>,
    controls: Vec<ControlInput>,
}

impl MpcSolver {
    pub fn new(config: MpcConfig, params: VehicleParams) -> Result<Self, MpcError> {
        config.validate()?;
        let n = config.horizon - 1;
        let mut lower = Vec::with_capacity(2 * n);
        let mut upper = Vec::with_capacity(2 * n);
        for _ in 0..n {
            lower.extend([params.u_min, params.delta_min]);
            upper.extend([params.u_max, params.delta_max]);
        }
        Ok(Self {
            config,
            params,
            previous: None,
            lower,
            upper,
            states: Vec::with_capacity(n + 1),
            controls: Vec::with_capacity(n),
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }

    fn cost_of(&mut self, start: &VehicleState, x: &[f64], v_ref: f64, path: &impl PathHeading) -> f64 {
        unpack(x, &mut self.controls);
        rollout_into(
            start,
            &self.controls,
            self.config.dt,
            &self.params,
            path,
            &mut self.states,
        );
        evaluate_cost(&self.states, &self.controls, v_ref, &self.config).expect("rollout length")
    }

    fn grad_of(
        &mut self,
        start: &VehicleState,
        x: &[f64],
        v_ref: f64,
        path: &impl PathHeading,
        grad: &mut [f64],
    ) -> f64 {
        unpack(x, &mut self.controls);
        rollout_into(
            start,
            &self.controls,
            self.config.dt,
            &self.params,
            path,
            &mut self.states,
        );
        adjoint(
            &self.states,
            &self.controls,
            v_ref,
            &self.config,
            &self.params,
            path,
            grad,
        )
    }

    fn project(&self, x: &mut [f64]) {
        for ((xi, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(*lo, *hi);
        }
    }

    /// Minimises the cost from the cheapest of several starts: zero controls,
    /// the previous solution, constant traction that would reach `v_ref` over
    /// the horizon, and constant full braking or full traction. The
    /// zero-velocity clamp makes the cost nonconvex: at standstill zero
    /// controls have a zero gradient, and braking to a stop can beat any
    /// smooth deceleration. Never fails on the iteration cap: the best
    /// iterate is returned with `converged = false`.
    pub fn solve(
        &mut self,
        current: &VehicleState,
        v_ref: f64,
        path: &impl PathHeading,
    ) -> Result<MpcSolution, MpcError> {
        if !current.is_finite() {
            return Err(MpcError::NonFiniteState);
        }
        if !v_ref.is_finite() {
            return Err(MpcError::BadReference(v_ref));
        }
        let n = self.config.horizon - 1;
        let dim = 2 * n;

        let mut x = vec![0.0; dim];
        self.project(&mut x);
        let mut fx = self.cost_of(current, &x, v_ref, path);
        if let Some(prev) = self.previous.clone() {
            let mut warm = vec![0.0; dim];
            pack(&prev, &mut warm);
            self.project(&mut warm);
            let fw = self.cost_of(current, &warm, v_ref, path);
            if fw < fx {
                x = warm;
                fx = fw;
            }
        }
        let span = n as f64 * self.config.dt;
        let u_ff = self.params.resistance(v_ref) + (v_ref - current.v) / span;
        for u in [u_ff, self.params.u_min, self.params.u_max] {
            let mut c: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { u } else { 0.0 }).collect();
            self.project(&mut c);
            let fc = self.cost_of(current, &c, v_ref, path);
            if fc < fx {
                x = c;
                fx = fc;
            }
        }

        let mut g = vec![0.0; dim];
        let mut trial = vec![0.0; dim];
        let mut g_trial = vec![0.0; dim];
        self.grad_of(current, &x, v_ref, path, &mut g);
        let mut alpha = initial_step(&g);
        let mut converged = false;
        let mut iterations = 0;

        while iterations < self.config.max_iterations {
            iterations += 1;
            // Armijo backtracking along the projection arc
            let mut accepted = None;
            let mut a = alpha;
            for _ in 0..40 {
                for i in 0..dim {
                    trial[i] = x[i] - a * g[i];
                }
                self.project(&mut trial);
                let slope: f64 = (0..dim).map(|i| g[i] * (trial[i] - x[i])).sum();
                if slope >= 0.0 {
                    break;
                }
                let ft = self.cost_of(current, &trial, v_ref, path);
                if ft <= fx + 1e-4 * slope {
                    accepted = Some(ft);
                    break;
                }
                a *= 0.5;
            }
            let Some(ft) = accepted else {
                converged = true;
                break;
            };
            let decrease = fx - ft;
            self.grad_of(current, &trial, v_ref, path, &mut g_trial);

            // Barzilai-Borwein step for the next iteration
            let (mut ss, mut sy) = (0.0, 0.0);
            for i in 0..dim {
                let si = trial[i] - x[i];
                ss += si * si;
                sy += si * (g_trial[i] - g[i]);
            }
            alpha = if sy > 1e-16 {
                (ss / sy).clamp(1e-8, 1e3)
            } else {
                a * 2.0
            };

            std::mem::swap(&mut x, &mut trial);
            std::mem::swap(&mut g, &mut g_trial);
            fx = ft;
            if decrease < self.config.tolerance {
                converged = true;
                break;
            }
        }

        unpack(&x, &mut self.controls);
        let controls = self.controls.clone();
        let predicted_states = rollout(current, &controls, self.config.dt, &self.params, path);
        self.previous = Some(controls.clone());
        Ok(MpcSolution {
            controls,
            predicted_states,
            cost: fx,
            converged,
            iterations,
        })
    }
}

fn initial_step(g: &[f64]) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        (1.0 / norm).min(1.0)
    } else {
        1.0
    }
}

fn pack(controls: &[ControlInput], x: &mut [f64]) {
    for (k, c) in controls.iter().enumerate() {
        x[2 * k] = c.u;
        x[2 * k + 1] = c.delta;
    }
}

fn unpack(x: &[f64], out: &mut Vec<ControlInput>) {
    out.clear();
    out.extend(x.chunks_exact(2).map(|p| ControlInput::new(p[0], p[1])));
}

/// Cold-start solve with a fresh solver.
pub fn solve(
    current: &VehicleState,
    v_ref: f64,
    path: &impl PathHeading,
    params: &VehicleParams,
    config: &MpcConfig,
) -> Result<MpcSolution, MpcError> {
    MpcSolver::new(config.clone(), *params)?.solve(current, v_ref, path)
}
