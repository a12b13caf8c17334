//! Hierarchical vision-language-action policy: a waypoint planner, a hand
//! motion generator and an action generator sharing one attention trunk,
//! plus the synthetic world, training loop and evaluation used to exercise it.

pub mod bin;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fine;
pub mod flow;
pub mod intention;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod quat;
pub mod rng;
pub mod runs;
pub mod synth;
pub mod trainer;
pub mod waypoint;

pub use error::{Error, Result};
