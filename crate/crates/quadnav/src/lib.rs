//! Closed-loop identification and steady-state-aware MPC for a quadcopter
//! described by decoupled second-order linear axis dynamics.
//!
//! The pipeline mirrors a full lab workflow: fly sinusoidal excitation
//! trajectories under a PD loop, fit per-axis `(alpha, beta)` parameters by
//! least squares, discretize the model with zero-order hold, synthesize an
//! MPC with Riccati terminal cost and a maximal admissible terminal set, and
//! validate tracking in a delayed closed-loop simulator — optionally over a
//! UDP pose/command link that splits plant and controller into processes.

pub mod axis_model;
pub mod config;
pub mod exec;
pub mod ident;
pub mod link;
pub mod mpc;
pub mod qp;
pub mod sigproc;
pub mod sim;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
