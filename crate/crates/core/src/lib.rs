//! Trajectory-level reward sharpening of small diffusion models on
//! synthetic 2-D data.

pub mod baselines;
pub mod classifier;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod rewards;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod trainers;
pub mod trajectory;

pub use error::{Error, ExternalError, Result};
