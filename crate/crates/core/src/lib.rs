//! Multiview point-cloud registration refined by prior-aware diffusion over
//! SE(3)^N, with classical synchronization baselines and an experiment harness.

pub mod attention;
pub mod baselines;
pub mod conf;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod lie;
pub mod metrics;
pub mod surrogate;

pub use error::{Error, Result};
