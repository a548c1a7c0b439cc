//! The separated control problem on a grid over the effective simplex.

mod bellman;
mod grid;
mod iterate;

pub use bellman::{
    bellman_const, bellman_sl, const_row, default_dt, default_t_max, one_stage_cost, sl_row, Applied,
    BellmanOperator, Mode, Row, SolverConfig,
};
pub use grid::{BeliefGrid, DEFAULT_GRID_CAP};
pub use iterate::{
    kappa_hat, lift_value, solve, value_iteration, value_iteration_with, Solution, SolveReport, StationaryPolicy,
    ValueField,
};

use thiserror::Error;

use crate::control::ControlError;
use crate::filter::FilterError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("grid resolution must be at least 1, got {0}")]
    BadResolution(u32),
    #[error("grid would have {vertices} vertices, above the cap of {cap}")]
    GridTooLarge { vertices: f64, cap: usize },
    #[error("time step {dt} is not in (0, 1 / C_lambda) with C_lambda = {c_lambda}")]
    StepTooLarge { dt: f64, c_lambda: f64 },
    #[error("parameter {0} has invalid value {1}")]
    BadParameter(&'static str, f64),
    #[error("field has {got} values, grid has {expected} vertices")]
    FieldShape { expected: usize, got: usize },
    #[error("no convergence after {iterations} iterations (last change {diff})")]
    NoConvergence { iterations: usize, diff: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}
