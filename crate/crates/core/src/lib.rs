//! Meta-learning with learned inner-loop losses: CAVIA, MAML, and context
//! adaptation driven by a per-sample or pairwise loss network.

mod error;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod report;
pub mod runner;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
