//! Closed-loop simulator for a cellular base station that tracks a UAV with
//! mmWave radar echoes and serves it data on the same array.
//!
//! The crate is organised as a pipeline of small modules:
//!
//! * [`citymap`] — extruded-prism building geometry and exact segment occlusion
//! * [`lpm`] — per-cell line-of-sight probability beliefs (Beta pseudo-counts)
//!   with a building-height prior and Bayesian refinement from RF measurements
//! * [`kinematics`] — constant-velocity UAV motion with boundary reflection
//! * [`sensing`] — mono-static echo synthesis: range / azimuth / zenith /
//!   radial-speed observables, SNR-dependent noise, blocker echoes, misses
//! * [`tracking`] — extended Kalman filter over the 6-state position/velocity
//!   model with an analytic measurement Jacobian
//! * [`identification`] — Bayesian LoS/NLoS hypothesis test that fuses the map
//!   prior with the innovation likelihood
//! * [`beamforming`] — planar-array steering, predictive beam pointing and a
//!   codebook-sweep training baseline
//! * [`association`] — base-station handover policy and achievable-rate model
//! * [`sim`] — the per-slot closed loop, batch Monte-Carlo driver and metrics
//!
//! Everything is deterministic given a scenario seed: random draws come from
//! counter-seeded ChaCha streams, so a single run reproduces bit-for-bit and
//! batch runs are independent of execution order.

pub mod association;
pub mod beamforming;
pub mod citymap;
pub mod error;
pub mod identification;
pub mod kinematics;
pub mod lpm;
pub mod sensing;
pub mod sim;
pub mod tracking;

pub use error::{Error, Result};

/// 3-vector of f64, used for positions and velocities throughout.
pub type Vec3 = nalgebra::Vector3<f64>;
