//! Collective destination choice for linear-quadratic agents.
//!
//! A population of agents with linear dynamics picks one of several
//! destinations. Each agent pays for control effort, for straying from the
//! population mean, and for missing its closest destination at the horizon.
//! The crate computes the mean-field equilibria of this game for finite
//! populations, for continuum populations described by a distribution, and
//! for populations mixing several agent types, and it checks the resulting
//! strategies against finite-population best responses.

pub mod basins;
pub mod cli;
pub mod equilibrium_det;
pub mod equilibrium_stoch;
pub mod error;
pub mod hetero;
pub mod model;
pub mod numerics;
pub mod sim_nash;
pub mod tracking;

pub use error::{Error, Result};
