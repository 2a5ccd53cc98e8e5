//! Kinematic bicycle with aerodynamic drag and rolling resistance.
//!
//! The same forward-Euler update drives the simulated vehicles and the
//! leader MPC's internal prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::wrap_angle;

/// Heading of the reference path as a function of arc length.
///
/// `heading` is unwrapped (continuous across laps) so that differences
/// between nearby arc positions never jump by 2π.
pub trait PathHeading {
    fn heading(&self, s: f64) -> f64;
    /// d heading / d s.
    fn heading_rate(&self, s: f64) -> f64;
    fn wrap_arc(&self, s: f64) -> f64;
}

/// Infinite straight line along +x.
#[derive(Debug, Clone, Copy, Default)]
pub struct StraightPath;

impl PathHeading for StraightPath {
    fn heading(&self, _s: f64) -> f64 {
        0.0
    }
    fn heading_rate(&self, _s: f64) -> f64 {
        0.0
    }
    fn wrap_arc(&self, s: f64) -> f64 {
        s
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid vehicle parameter {field}: {reason}")]
pub struct ParamError {
    pub field: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// Front axle to centre of gravity.
    pub l_f: f64,
    pub c_d: f64,
    pub rho_a: f64,
    /// Frontal area.
    pub a_v: f64,
    pub mass: f64,
    pub mu: f64,
    pub g: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            l_f: 2.67,
            c_d: 0.3,
            rho_a: 1.225,
            a_v: 2.2,
            mass: 1500.0,
            mu: 0.01,
            g: 9.81,
            u_min: -5.0,
            u_max: 3.0,
            delta_min: -0.436,
            delta_max: 0.436,
            v_min: 0.0,
            v_max: 13.89,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        let positive = [
            ("l_f", self.l_f),
            ("c_d", self.c_d),
            ("rho_a", self.rho_a),
            ("a_v", self.a_v),
            ("mass", self.mass),
            ("mu", self.mu),
            ("g", self.g),
            ("v_max", self.v_max),
        ];
        for (field, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ParamError {
                    field,
                    reason: format!("{value} must be positive"),
                });
            }
        }
        if !(self.v_min >= 0.0) {
            return Err(ParamError {
                field: "v_min",
                reason: format!("{} must be >= 0", self.v_min),
            });
        }
        let ordered = [
            ("u_min", self.u_min, self.u_max),
            ("delta_min", self.delta_min, self.delta_max),
            ("v_min", self.v_min, self.v_max),
        ];
        for (field, lo, hi) in ordered {
            if !(lo < hi) {
                return Err(ParamError {
                    field,
                    reason: format!("lower bound {lo} not below upper bound {hi}"),
                });
            }
        }
        Ok(())
    }

    /// Quadratic drag coefficient per unit mass, 0.5·C_D·ρ·A / M.
    pub fn drag_per_mass(&self) -> f64 {
        0.5 * self.c_d * self.rho_a * self.a_v / self.mass
    }

    /// Traction that exactly cancels drag and rolling resistance at `v`.
    pub fn resistance(&self, v: f64) -> f64 {
        self.drag_per_mass() * v * v + self.mu * self.g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Traction (positive) or braking (negative) force per unit mass.
    pub u: f64,
    pub delta: f64,
}

impl ControlInput {
    pub fn new(u: f64, delta: f64) -> Self {
        Self { u, delta }
    }

    pub fn clamped(self, p: &VehicleParams) -> Self {
        Self {
            u: self.u.clamp(p.u_min, p.u_max),
            delta: self.delta.clamp(p.delta_min, p.delta_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub cte: f64,
    pub epsi: f64,
    pub arc_s: f64,
    pub vehicle_length: f64,
}

impl VehicleState {
    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.psi, self.v, self.cte, self.epsi, self.arc_s]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn net_acceleration(v: f64, u: f64, params: &VehicleParams) -> f64 {
    u - 0.5 * params.c_d * params.rho_a * params.a_v * v * v / params.mass - params.mu * params.g
}

/// One explicit-Euler step. Velocity is clamped at zero afterwards; the
/// orientation error follows the path heading at the advanced arc position.
pub fn step(
    state: &VehicleState,
    input: ControlInput,
    dt: f64,
    params: &VehicleParams,
    path: &impl PathHeading,
) -> VehicleState {
    let v = state.v;
    let (sin_psi, cos_psi) = state.psi.sin_cos();
    let (sin_e, cos_e) = state.epsi.sin_cos();
    let yaw = v * input.delta / params.l_f * dt;
    let ds = v * cos_e * dt;
    let s_next = state.arc_s + ds;
    let heading_change = path.heading(s_next) - path.heading(state.arc_s);

    VehicleState {
        x: state.x + v * cos_psi * dt,
        y: state.y + v * sin_psi * dt,
        psi: wrap_angle(state.psi + yaw),
        v: (v + net_acceleration(v, input.u, params) * dt).max(0.0),
        cte: state.cte + v * sin_e * dt,
        epsi: state.epsi + yaw - heading_change,
        arc_s: path.wrap_arc(s_next),
        vehicle_length: state.vehicle_length,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(v: f64) -> VehicleState {
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
    fn net_acceleration_examples() {
        let mut p = VehicleParams::default();
        let a = net_acceleration(10.0, 0.0, &p);
        assert!((a + 0.12505).abs() < 1e-5, "{a}");
        assert!(net_acceleration(10.0, 0.12505, &p).abs() < 1e-5);
        p.mu = 0.0;
        assert_eq!(net_acceleration(0.0, 0.0, &p), 0.0);
    }

    #[test]
    fn straight_constant_speed() {
        let p = VehicleParams::default();
        let s0 = state(10.0);
        let u = p.resistance(10.0);
        let s1 = step(&s0, ControlInput::new(u, 0.0), 0.1, &p, &StraightPath);
        assert!((s1.x - 1.0).abs() < 1e-12);
        assert_eq!(s1.y, 0.0);
        assert_eq!(s1.psi, 0.0);
        assert!((s1.v - 10.0).abs() < 1e-12);
        assert!((s1.arc_s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn steering_yaw_increment() {
        let p = VehicleParams::default();
        let s1 = step(&state(10.0), ControlInput::new(0.0, 0.1), 0.1, &p, &StraightPath);
        assert!((s1.psi - 10.0 * 0.1 / 2.67 * 0.1).abs() < 1e-12);
        assert!((s1.psi - 0.03745).abs() < 1e-5);
        assert!((s1.epsi - s1.psi).abs() < 1e-15);
    }

    #[test]
    fn half_steps_agree_to_second_order() {
        let p = VehicleParams::default();
        let mut s0 = state(8.0);
        s0.psi = 0.2;
        s0.epsi = 0.2;
        let input = ControlInput::new(1.0, 0.05);
        for h in [0.2, 0.1, 0.05] {
            let one = step(&s0, input, h, &p, &StraightPath);
            let half = step(&s0, input, h / 2.0, &p, &StraightPath);
            let two = step(&half, input, h / 2.0, &p, &StraightPath);
            let err = (one.x - two.x).abs() + (one.y - two.y).abs() + (one.v - two.v).abs();
            assert!(err > 0.0, "Euler splits should differ");
            assert!(err < 2.0 * h * h, "h={h} err={err}");
        }
    }

    #[test]
    fn velocity_never_negative() {
        let p = VehicleParams::default();
        let s1 = step(&state(0.1), ControlInput::new(-5.0, 0.0), 0.1, &p, &StraightPath);
        assert_eq!(s1.v, 0.0);
    }

    #[test]
    fn params_validation_names_field() {
        let p = VehicleParams {
            mass: 0.0,
            ..Default::default()
        };
        assert_eq!(p.validate().unwrap_err().field, "mass");
        let p = VehicleParams {
            u_min: 4.0,
            ..Default::default()
        };
        assert_eq!(p.validate().unwrap_err().field, "u_min");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn coasting_is_dissipative(v in 0.01f64..30.0) {
                let p = VehicleParams::default();
                let s1 = step(&state(v), ControlInput::new(0.0, 0.0), 0.1, &p, &StraightPath);
                prop_assert!(s1.v < v);
            }

            #[test]
            fn rollout_is_composition(
                v in 0.0f64..14.0,
                inputs in proptest::collection::vec((-5.0f64..3.0, -0.4f64..0.4), 1..20),
            ) {
                let p = VehicleParams::default();
                let route = crate::world::Route::default_ring();
                let mut a = state(v);
                let mut states = vec![a];
                for &(u, d) in &inputs {
                    a = step(&a, ControlInput::new(u, d), 0.1, &p, &route);
                    states.push(a);
                }
                // re-running from any intermediate state reproduces the tail
                let mid = inputs.len() / 2;
                let mut b = states[mid];
                for &(u, d) in &inputs[mid..] {
                    b = step(&b, ControlInput::new(u, d), 0.1, &p, &route);
                }
                prop_assert_eq!(a, b);
            }
        }
    }
}
