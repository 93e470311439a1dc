//! Decentralized collision avoidance for quadrotor swarms (DCAD).
//!
//! Each agent runs a flatness-based linear MPC over a chain-of-integrators
//! flat model. ORCA velocity half-planes, propagated along the prediction
//! horizon, enter the MPC as state constraints; downwash is handled by
//! modelling the upper vehicle of each pair as an attitude-oriented
//! ellipsoid; neighbor state is tracked with per-pair Kalman filters whose
//! covariances inflate the collision geometry.
//!
//! The [`sim`] module wraps the per-agent stack in a deterministic swarm
//! simulation with the benchmark scenarios (circle exchange, opposing
//! lemniscates) and their metrics.

pub mod dynamics;
pub mod estimation;
pub mod mpc;
pub mod orca;
pub mod qp;
pub mod sim;

pub use dynamics::{AttitudeCommand, FlatInput, FlatState, QuadState, VehicleParams};
pub use mpc::{FlatModel, MpcConfig, MpcSolution};
pub use orca::{BoundingVolume, HalfPlane, NeighborSnapshot};
