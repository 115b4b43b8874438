//! Ground-truth muscle-activation trajectories for simulated point-to-point
//! reaches of a planar two-link, six-muscle arm, and a deep sigmoid
//! autoencoder whose decoder predicts those trajectories from reach endpoints.
//!
//! The pipeline is:
//!
//! 1. [`dataset`] samples reach pairs and labels them, either through
//!    [`minjerk`] + inverse kinematics/dynamics ([`arm`]) or through torque-space
//!    trajectory optimization ([`ilqg`]). Torques are mapped to activations by
//!    the per-step minimum-norm QP in [`muscle`].
//! 2. [`nn`] pretrains a 300-150-50-4-50-150-300 autoencoder layer by layer and
//!    retrains its decoder half on normalized reach endpoints.
//! 3. [`eval`] scores the decoder by activation RMS error and by the endpoint
//!    error of the arm driven open-loop with the predicted activations.
//!
//! [`cli`] drives the stages from a TOML config file.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arm;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod ilqg;
pub mod minjerk;
pub mod muscle;
pub mod nn;

mod checksum;

/// Number of control steps in one reach.
pub const HORIZON: usize = 50;
/// Control period (s); `HORIZON * CONTROL_DT` is the 1 s reach duration.
pub const CONTROL_DT: f64 = 0.02;
/// Number of muscles driving the arm.
pub const MUSCLES: usize = 6;
/// Length of a flattened activation trajectory.
pub const TRAJ_DIM: usize = HORIZON * MUSCLES;

pub use arm::{ArmError, ArmParams, HandKinematics, JointState};
pub use dataset::{Dataset, GenConfig, Method, ReachPair, Sample, Split};
pub use ilqg::{IlqgConfig, TorqueTrajectory};
pub use muscle::{ActivationTrajectory, ActivationVector};
pub use nn::{Network, ReachDecoder, TrainConfig};
