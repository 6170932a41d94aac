//! Communication-aware trajectory planning for a quadrotor.
//!
//! The library plans predetermined trajectories from a start point to a goal
//! point in fixed time, trading off motion energy against the expected number
//! of bits transmitted to a fixed access point over a lognormal-shadowing
//! channel, with optional circular obstacles.
//!
//! Pipeline:
//! 1. [`dynamics`] — linearized planar quadrotor model and a nonlinear
//!    closed-loop validator of the linearization.
//! 2. [`mincontrol`] — minimum-energy state transfers via the closed-form
//!    controllability Gramian.
//! 3. [`channel`] — SNR/rate model under shadowing and the radial
//!    quantization of the expected-rate curve.
//! 4. [`planner`] — waypoint decomposition, convex inner problem, simulated
//!    annealing over crossing angles and leg durations, depth sweep.
//! 5. [`simulate`] — seeded Monte-Carlo link simulation of a finished plan.

pub mod channel;
pub mod dynamics;
pub mod mincontrol;
pub mod planner;
pub mod simulate;

pub use channel::{ChannelParams, QuantizedRateMap, RateLadder};
pub use dynamics::{LinearPlanarModel, PlanarState, QuadrotorParams};
pub use mincontrol::{GramianCache, SegmentControlLaw, SegmentSpec};
pub use planner::{CommsObjective, Obstacle, PlanProblem, PlanResult, SaConfig};
pub use simulate::{SimConfig, SimReport};
