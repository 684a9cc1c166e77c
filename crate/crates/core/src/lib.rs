//! Battery management benchmark: a home-battery arbitrage environment,
//! exogenous data tooling, forecasters, a receding-horizon planner, a small
//! neural-network library and a PPO learner, plus the comparison harness.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod forecast;
pub mod mpc;
pub mod nn;
pub mod ppo;

pub use error::{Error, Result};
