//! Eco-platooning on a signalized ring corridor.
//!
//! Platoon leaders run a nonlinear model-predictive controller that tracks a
//! reference velocity produced by a SPaT-driven green-window advisory. The
//! advisory also decides when a platoon must split so that a front subgroup
//! clears the next green window. Followers use a gap- and velocity-based
//! CACC law tracked by a gain-scheduled PID. A polynomial regression model
//! accrues fuel per vehicle so that runs with and without the advisory can be
//! compared.
//!
//! Everything is deterministic: identical configurations produce identical
//! trajectories, summaries and event logs.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advisory;
pub mod cacc;
pub mod cli;
pub mod dynamics;
pub mod engine;
pub mod fuel;
pub mod messages;
pub mod mpc;
pub mod report;
pub mod world;

pub use advisory::{AdvisoryDecision, GreenWindow, PlatoonSnapshot};
pub use dynamics::{ControlInput, VehicleParams, VehicleState};
pub use engine::{run, ScenarioConfig};
pub use messages::{Phase, SignalId, VehicleId};
