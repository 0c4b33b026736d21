//! Penalized generalized estimating equations for crossover trials with
//! intensively sampled outcomes and smooth carry-over effects.

pub mod basis;
pub mod cli;
pub mod correlation;
pub mod design;
pub mod error;
pub mod estimability;
pub mod glm;
pub mod inference;
pub mod linalg;
pub mod par;
pub mod pgee;
pub mod simulate;
pub mod tuning;

pub use error::{Error, Result};
