//! Identity-preserved generation on a procedural toy world: a rectified-flow
//! diffusion transformer base, the InfuseNet residual branch, multi-stage
//! training and exact evaluation.

pub mod config;
pub mod dit;
pub mod error;
pub mod eval;
pub mod flow;
pub mod infusenet;
pub mod io;
pub mod nn;
pub mod params;
pub mod run_config;
pub mod sampling;
pub mod selftest;
pub mod toyworld;
pub mod training;

pub use config::ModelConfig;
pub use error::{InfuError, Result};
pub use params::ParamStore;
