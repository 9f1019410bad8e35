//! Neuro-algorithmic policies: a differentiable time-dependent shortest-path
//! layer under a learned cost predictor, trained by imitation on a
//! moving-obstacle grid world and executed as a receding-horizon controller.

pub mod bbdiff;
pub mod error;
pub mod expert;
pub mod gridworld;
pub mod neural;
pub mod policy;
pub mod tdsp;
pub mod training;

pub use error::{Error, Result};
