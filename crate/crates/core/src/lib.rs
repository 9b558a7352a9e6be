//! Penalty-based constrained bilevel subgradient optimization on tabular
//! CMDPs and synthetic problems, with Moreau-envelope diagnostics.

pub mod analysis;
pub mod cbso;
pub mod checkpoint;
pub mod cmdp;
pub mod config;
pub mod error;
pub mod estimators;
pub mod objectives;
pub mod params;
pub mod penalty;
pub mod record;
pub mod rng;
pub mod schedule;
pub mod synthetic;

pub use error::{Error, Result};
pub use params::ParamVector;
pub use penalty::PenaltyCoefficients;
pub use rng::RngStreamSpec;
pub use schedule::StepSchedule;
