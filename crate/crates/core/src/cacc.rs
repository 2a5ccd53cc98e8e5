//! Follower control: gap- and velocity-based target speed, tracked by a
//! gain-scheduled PID with conditional-integration anti-windup.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{VehicleParams, VehicleState};
use crate::world::{wrap_angle, Route};

#[derive(Debug, Error, PartialEq)]
#[error("invalid CACC config field {field}: {reason}")]
pub struct CaccConfigError {
    pub field: &'static str,
    pub reason: String,
}

/// PID gains applied while the ego speed lies in `[v_lo, v_hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainBand {
    pub v_lo: f64,
    pub v_hi: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaccConfig {
    pub s_min: f64,
    pub s_max: f64,
    /// Standstill gap.
    pub s_0: f64,
    pub t_gap: f64,
    pub k1_min: f64,
    pub k1_max: f64,
    pub k2_min: f64,
    pub k2_max: f64,
    pub gain_schedule: Vec<GainBand>,
    /// Hard bound on |integral| in (m/s)·s.
    pub integral_limit: f64,
    /// Filled from the vehicle parameters.
    #[serde(skip)]
    pub v_max: f64,
    #[serde(skip)]
    pub output_bounds: [f64; 2],
}

impl Default for CaccConfig {
    fn default() -> Self {
        let band = |v_lo, v_hi, kp, ki| GainBand {
            v_lo,
            v_hi,
            kp,
            ki,
            kd: 0.0,
        };
        Self {
            s_min: 10.0,
            s_max: 15.0,
            s_0: 1.0,
            t_gap: 1.0,
            k1_min: 0.2,
            k1_max: 0.6,
            k2_min: 0.3,
            k2_max: 0.7,
            gain_schedule: vec![
                band(0.0, 5.0, 1.0, 0.05),
                band(5.0, 10.0, 0.8, 0.05),
                band(10.0, 13.89, 0.6, 0.03),
            ],
            integral_limit: 20.0,
            v_max: 13.89,
            output_bounds: [-5.0, 3.0],
        }
    }
}

impl CaccConfig {
    pub fn with_vehicle_limits(mut self, params: &VehicleParams) -> Self {
        self.v_max = params.v_max;
        self.output_bounds = [params.u_min, params.u_max];
        self
    }

    pub fn validate(&self) -> Result<(), CaccConfigError> {
        let bad = |field, reason: String| Err(CaccConfigError { field, reason });
        if !(self.s_min > 0.0 && self.s_min <= self.s_max) {
            return bad(
                "s_min",
                format!("need 0 < s_min <= s_max, got {} / {}", self.s_min, self.s_max),
            );
        }
        if !(self.s_0 >= 0.0) || !(self.t_gap >= 0.0) {
            return bad("s_0", "standstill gap and time gap must be nonnegative".into());
        }
        if !(self.k1_min <= self.k1_max) {
            return bad("k1_min", format!("{} > k1_max {}", self.k1_min, self.k1_max));
        }
        if !(self.k2_min <= self.k2_max) {
            return bad("k2_min", format!("{} > k2_max {}", self.k2_min, self.k2_max));
        }
        if !(self.integral_limit > 0.0) {
            return bad("integral_limit", "must be positive".into());
        }
        let bands = &self.gain_schedule;
        if bands.is_empty() {
            return bad("gain_schedule", "at least one band required".into());
        }
        if bands[0].v_lo != 0.0 {
            return bad("gain_schedule", "first band must start at 0".into());
        }
        for w in bands.windows(2) {
            if w[0].v_hi != w[1].v_lo {
                return bad("gain_schedule", format!("bands break at {} / {}", w[0].v_hi, w[1].v_lo));
            }
        }
        for b in bands {
            if !(b.v_hi > b.v_lo) {
                return bad("gain_schedule", format!("empty band [{}, {})", b.v_lo, b.v_hi));
            }
        }
        if bands.last().expect("nonempty").v_hi + 1e-9 < self.v_max {
            return bad("gain_schedule", format!("bands stop short of v_max {}", self.v_max));
        }
        Ok(())
    }

    /// Band for `v`; speeds past the last band use the last band.
    pub fn gains_for(&self, v: f64) -> &GainBand {
        self.gain_schedule
            .iter()
            .find(|b| v >= b.v_lo && v < b.v_hi)
            .unwrap_or_else(|| self.gain_schedule.last().expect("validated nonempty"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CaccState {
    pub integral: f64,
    pub prev_error: Option<f64>,
    pub prev_target: Option<f64>,
}

pub fn desired_gap(v_ego: f64, config: &CaccConfig) -> f64 {
    config.s_min.max((config.s_0 + v_ego * config.t_gap).min(config.s_max))
}

/// Exponential-saturation gains; the magnitude of the gap error is used so
/// both gains stay within their `[min, max]` bands.
pub fn adaptive_gains(gap_error: f64, config: &CaccConfig) -> (f64, f64) {
    let blend = 1.0 - (-gap_error.abs() / config.s_max).exp();
    (
        config.k1_min + (config.k1_max - config.k1_min) * blend,
        config.k2_min + (config.k2_max - config.k2_min) * blend,
    )
}

pub fn target_velocity(v_preceding: f64, v_leader: f64, s_current: f64, v_ego: f64, config: &CaccConfig) -> f64 {
    let gap_error = s_current - desired_gap(v_ego, config);
    let (k1, k2) = adaptive_gains(gap_error, config);
    (v_preceding + k1 * gap_error + k2 * (v_leader - v_preceding)).clamp(0.0, config.v_max)
}

/// PID on the speed error. The integral is frozen while the output is
/// saturated in the direction of the error.
pub fn pid_accel(v_target: f64, v_ego: f64, state: CaccState, dt: f64, config: &CaccConfig) -> (f64, CaccState) {
    let gains = config.gains_for(v_ego);
    let [lo, hi] = config.output_bounds;
    let error = v_target - v_ego;
    let derivative = state.prev_error.map_or(0.0, |p| (error - p) / dt);
    let limit = config.integral_limit;

    let candidate = (state.integral + error * dt).clamp(-limit, limit);
    let raw = gains.kp * error + gains.ki * candidate + gains.kd * derivative;
    let winding = (raw > hi && error > 0.0) || (raw < lo && error < 0.0);
    let integral = if winding { state.integral } else { candidate };
    let u = (gains.kp * error + gains.ki * integral + gains.kd * derivative).clamp(lo, hi);

    (
        u,
        CaccState {
            integral,
            prev_error: Some(error),
            prev_target: Some(v_target),
        },
    )
}

/// Pure-pursuit steering toward the centreline point `lookahead` metres ahead.
pub fn pure_pursuit(state: &VehicleState, route: &Route, lookahead: f64, params: &VehicleParams) -> f64 {
    let (tx, ty) = route.point_at(state.arc_s + lookahead, 0.0);
    let alpha = wrap_angle((ty - state.y).atan2(tx - state.x) - state.psi);
    let dist = (tx - state.x).hypot(ty - state.y).max(1e-6);
    (2.0 * params.l_f * alpha.sin() / dist)
        .atan()
        .clamp(params.delta_min, params.delta_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CaccConfig {
        CaccConfig::default()
    }

    #[test]
    fn desired_gap_examples() {
        assert_eq!(desired_gap(5.0, &cfg()), 10.0);
        assert_eq!(desired_gap(12.0, &cfg()), 13.0);
        assert_eq!(desired_gap(20.0, &cfg()), 15.0);
    }

    #[test]
    fn gain_examples() {
        assert_eq!(adaptive_gains(0.0, &cfg()), (0.2, 0.3));
        let (k1, k2) = adaptive_gains(1e6, &cfg());
        assert!((k1 - 0.6).abs() < 1e-12 && (k2 - 0.7).abs() < 1e-12);
        let (k1, k2) = adaptive_gains(15.0, &cfg());
        let blend = 1.0 - (-1.0f64).exp();
        assert!((k1 - (0.2 + 0.4 * blend)).abs() < 1e-12);
        assert!((k1 - 0.4528).abs() < 1e-3);
        assert!((k2 - 0.5528).abs() < 1e-3);
        // negative errors map to the same band
        assert_eq!(adaptive_gains(-15.0, &cfg()), (k1, k2));
    }

    #[test]
    fn target_velocity_examples() {
        let c = cfg();
        assert_eq!(target_velocity(10.0, 10.0, desired_gap(10.0, &c), 10.0, &c), 10.0);

        let k1 = 0.2 + 0.4 * (1.0 - (-2.0f64 / 15.0).exp());
        let v = target_velocity(10.0, 10.0, 12.0, 5.0, &c);
        assert!((v - (10.0 + 2.0 * k1)).abs() < 1e-12);
        assert!((v - 10.4998).abs() < 1e-3);

        let v = target_velocity(8.0, 12.0, 10.0, 5.0, &c);
        assert!((v - 9.2).abs() < 1e-12);
    }

    #[test]
    fn target_velocity_is_clamped() {
        let c = cfg();
        assert_eq!(target_velocity(13.0, 13.5, 80.0, 13.0, &c), c.v_max);
        assert_eq!(target_velocity(0.0, 0.0, 0.0, 3.0, &c), 0.0);
    }

    fn p_only(kp: f64, ki: f64) -> CaccConfig {
        CaccConfig {
            gain_schedule: vec![GainBand {
                v_lo: 0.0,
                v_hi: 13.89,
                kp,
                ki,
                kd: 0.0,
            }],
            ..cfg()
        }
    }

    #[test]
    fn pid_examples() {
        let (u, _) = pid_accel(5.0, 5.0, CaccState::default(), 0.1, &cfg());
        assert_eq!(u, 0.0);

        let (u, _) = pid_accel(6.0, 5.0, CaccState::default(), 0.1, &p_only(0.8, 0.0));
        assert!((u - 0.8).abs() < 1e-12);

        let c = p_only(0.0, 0.1);
        let mut st = CaccState::default();
        let mut u = 0.0;
        for _ in 0..10 {
            (u, st) = pid_accel(6.0, 5.0, st, 0.1, &c);
        }
        assert!((u - 0.1).abs() < 1e-12);
    }

    #[test]
    fn integral_frozen_while_saturated() {
        let c = p_only(1.0, 0.5);
        let mut st = CaccState::default();
        for _ in 0..100 {
            let (u, next) = pid_accel(13.0, 0.0, st, 0.1, &c);
            assert_eq!(u, c.output_bounds[1]);
            st = next;
        }
        assert_eq!(st.integral, 0.0);
    }

    #[test]
    fn schedule_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.gain_schedule[1].v_lo = 6.0;
        assert_eq!(c.validate().unwrap_err().field, "gain_schedule");
        let c = CaccConfig { s_min: 20.0, ..cfg() };
        assert_eq!(c.validate().unwrap_err().field, "s_min");
    }

    #[test]
    fn pure_pursuit_steers_onto_circle() {
        let route = Route::default_ring();
        let p = VehicleParams::default();
        let (x, y) = route.point_at(0.0, 0.0);
        let s = VehicleState {
            x,
            y,
            psi: 0.0,
            v: 10.0,
            cte: 0.0,
            epsi: 0.0,
            arc_s: 0.0,
            vehicle_length: 4.5,
        };
        let d = pure_pursuit(&s, &route, 8.0, &p);
        // curvature of the 800 m ring times the wheelbase
        let expected = p.l_f * 2.0 * std::f64::consts::PI / 800.0;
        assert!((d - expected).abs() < 2e-3, "{d} vs {expected}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gap_monotone_and_bounded(a in 0.0f64..40.0, b in 0.0f64..40.0) {
                let c = cfg();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(desired_gap(lo, &c) <= desired_gap(hi, &c));
                let g = desired_gap(a, &c);
                prop_assert!(g >= c.s_min && g <= c.s_max);
            }

            #[test]
            fn gains_monotone_in_magnitude(a in -100.0f64..100.0, b in -100.0f64..100.0) {
                let c = cfg();
                let (ka, kb) = (adaptive_gains(a, &c), adaptive_gains(b, &c));
                prop_assert!(ka.0 >= c.k1_min && ka.0 <= c.k1_max);
                prop_assert!(ka.1 >= c.k2_min && ka.1 <= c.k2_max);
                if a.abs() <= b.abs() {
                    prop_assert!(ka.0 <= kb.0 && ka.1 <= kb.1);
                }
            }

            #[test]
            fn equilibrium_holds_speed(v in 0.0f64..13.89) {
                let c = cfg();
                let t = target_velocity(v, v, desired_gap(v, &c), v, &c);
                prop_assert!((t - v).abs() < 1e-12);
            }

            #[test]
            fn pid_output_bounded(target in 0.0f64..14.0, ego in 0.0f64..14.0, i in -20.0f64..20.0) {
                let c = cfg();
                let st = CaccState { integral: i, prev_error: Some(0.3), prev_target: None };
                let (u, next) = pid_accel(target, ego, st, 0.1, &c);
                prop_assert!(u >= c.output_bounds[0] && u <= c.output_bounds[1]);
                prop_assert!(next.integral.abs() <= c.integral_limit);
            }

            #[test]
            fn zero_error_keeps_integral(i in -20.0f64..20.0, v in 0.0f64..13.0) {
                let (_, next) = pid_accel(v, v, CaccState { integral: i, ..Default::default() }, 0.1, &cfg());
                prop_assert_eq!(next.integral, i);
            }
        }
    }
}
