//! Fully discrete finite element / implicit Euler solvers and a gradient
//! projection method for stochastic parabolic optimal control with an
//! integral constraint on the expected state.
//!
//! The state equation `dX = [γΔX + f + U] dt + σ dW` is discretized with P1
//! elements on interior nodes and implicit Euler in time. Controls are
//! deterministic; with additive noise the expected state and adjoint obey
//! the noise-free recursions, which is what [`optimizer`] iterates on.
//! Per-path solves in [`spde`] drive Monte Carlo strong-error estimation in
//! [`analysis`].

pub mod analysis;
pub mod error;
pub mod fem;
pub mod grid;
pub mod optimizer;
pub mod paths;
pub mod problems;
pub mod spde;

pub use error::{Error, Result};
pub use fem::{FemSystem, NodalField};
pub use grid::{make_interval_mesh, make_rectangle_mesh, make_time_grid, Mesh, TimeGrid};
pub use paths::BrownianEnsemble;
pub use problems::ManufacturedProblem;
pub use spde::{PathEnsembleTrajectory, ProblemSpec, SpdeSolver, Trajectory};
