//! Polynomial regression fuel model and per-vehicle accumulation.
//!
//! Rates are in litres per second throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speeds below this count as standstill.
pub const STANDSTILL_SPEED: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
#[error("invalid fuel coefficient {field}: {reason}")]
pub struct FuelError {
    pub field: &'static str,
    pub reason: String,
}

/// Coefficients of the cruise (`b*`) and acceleration (`c*`) polynomials.
///
/// Defaults are the passenger-car fit of Kamal et al. (2011), published in
/// mL/s and converted here to L/s. The idle rate reuses the zero-speed cruise
/// term `b0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuelCoefficients {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub f_id: f64,
}

impl Default for FuelCoefficients {
    fn default() -> Self {
        Self {
            b0: 0.1569e-3,
            b1: 2.450e-5,
            b2: -7.415e-7,
            b3: 5.975e-8,
            c0: 0.07224e-3,
            c1: 9.681e-5,
            c2: 1.075e-6,
            f_id: 0.1569e-3,
        }
    }
}

impl FuelCoefficients {
    pub fn validate(&self) -> Result<(), FuelError> {
        let all = [
            ("b0", self.b0),
            ("b1", self.b1),
            ("b2", self.b2),
            ("b3", self.b3),
            ("c0", self.c0),
            ("c1", self.c1),
            ("c2", self.c2),
            ("f_id", self.f_id),
        ];
        for (field, value) in all {
            if !value.is_finite() {
                return Err(FuelError {
                    field,
                    reason: "must be finite".into(),
                });
            }
        }
        if !(self.f_id > 0.0) {
            return Err(FuelError {
                field: "f_id",
                reason: format!("{} must be positive", self.f_id),
            });
        }
        Ok(())
    }

    pub fn cruise(&self, v: f64) -> f64 {
        self.b0 + self.b1 * v + self.b2 * v * v + self.b3 * v * v * v
    }

    pub fn accel(&self, v: f64, a_net: f64) -> f64 {
        a_net * (self.c0 + self.c1 * v + self.c2 * v * v)
    }
}

/// Instantaneous fuel rate. Standstill (`v < 0.1`) and braking (`u < 0`)
/// burn exactly the idle rate; otherwise cruise plus acceleration terms,
/// floored at zero.
pub fn fuel_rate(v: f64, a_net: f64, u: f64, coeffs: &FuelCoefficients) -> f64 {
    if v < STANDSTILL_SPEED || u < 0.0 {
        return coeffs.f_id;
    }
    (coeffs.cruise(v) + coeffs.accel(v, a_net)).max(0.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FuelAccumulator {
    pub cumulative: f64,
    pub last_rate: f64,
}

impl FuelAccumulator {
    pub fn accumulate(self, rate: f64, dt: f64) -> Self {
        Self {
            cumulative: self.cumulative + rate * dt,
            last_rate: rate,
        }
    }
}
