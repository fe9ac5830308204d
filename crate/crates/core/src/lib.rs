//! Simultaneous inference for mixed parameters in linear mixed models.

pub mod covariance;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod prediction;
pub mod simulation;

pub use error::{LmmError, Result};
