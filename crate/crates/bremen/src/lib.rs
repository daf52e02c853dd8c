//! Deployment-efficient model-based policy optimization: an ensemble of
//! learned dynamics models, behavior-cloned policy initialization, and
//! trust-region updates on imagined rollouts, with matching theory checks.

pub mod adam;
pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod policy;
pub mod bounds;
pub mod riccati;
pub mod trpo;

pub use error::{BremenError, Result};
