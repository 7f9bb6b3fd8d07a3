//! GRPO with selective sample replay and forced rethinking, trained on
//! seeded synthetic tasks with exactly-differentiable log-linear policies.

pub mod env;
pub mod error;
pub mod grpo;
pub mod optim;
pub mod policy;
pub mod records;
pub mod reference;
pub mod rethink;
pub mod rng;
pub mod ssr;
pub mod telemetry;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
