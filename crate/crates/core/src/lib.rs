//! Structured stochastic dynamics models: a Lagrangian prior with a
//! flow-matched residual force, baselines, simulated environments, a sampling
//! planner and evaluation tooling.

pub mod autodiff;
pub mod baselines;
pub mod cfm;
pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod lnn;
pub mod model;
pub mod mppi;
pub mod nets;
pub mod persistence;
pub mod plot;
pub mod state;
pub mod stride;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
