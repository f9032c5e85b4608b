//! Mechanistic spatial models built from Ornstein-Uhlenbeck approximations of
//! linear advection-diffusion-deposition processes.
//!
//! The crate assembles finite-volume transport operators on rectangular grids,
//! derives the Gaussian laws of the resulting OU system (transient, stationary
//! and time-averaged), fits the coupled SO2 to SO4 model by MCMC and forecasts
//! exposure reductions under emission interventions.

pub mod error;
pub mod fixture;
pub mod forecast;
pub mod grid;
pub mod inference;
pub mod io;
pub mod operator;
pub mod ou_dist;
pub mod sde;
pub mod sparse;
pub mod sulfate;

pub use error::{Error, Result};
