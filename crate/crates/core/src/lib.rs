//! Tracking MPC for linear time-varying systems whose reference trajectory need
//! not satisfy the dynamics.
//!
//! The pieces, bottom up:
//!
//! - [`ltv`]: models, path constraints, time grids.
//! - [`reference`]: time-parameterized references and their infeasibility.
//! - [`cost`], [`ocp`]: quadratic costs and a structured interior-point / SQP solver.
//! - [`rotation`]: multiplier-based cost rotation around the feasible reference.
//! - [`terminal`]: LQR terminal ingredients and their sampling-based validation.
//! - [`mpc`], [`simulator`]: receding-horizon controllers and closed-loop certificates.
//! - [`robot`]: the two-link planar robot benchmark.

pub mod cost;
pub mod error;
pub mod export;
pub mod ltv;
pub mod mpc;
pub mod ocp;
pub mod reference;
pub mod robot;
pub mod rotation;
pub mod simulator;
pub mod terminal;

pub use cost::{QuadForm, QuadraticStageCost, StageCost};
pub use error::{Error, Result};
pub use ltv::{AffineConstraints, ConstraintSet, LtvModel, TimeGrid, Unconstrained};
pub use ocp::{solve_qp, solve_reference_ocp, solve_sqp, OcpProblem, OcpSolution, TerminalMode};
pub use reference::{Reference, SharedReference};
pub use rotation::{RotatedCost, RotatedTerminal, RotationData};
pub use terminal::TerminalIngredients;
