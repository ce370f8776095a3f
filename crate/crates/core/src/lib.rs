//! Stochastic averaging for scalar delay equations near a Hopf bifurcation.

pub mod averaged;
pub mod config;
pub mod dde_sim;
pub mod expr;
pub mod harness;
pub mod history;
pub mod noise;
pub mod quad;
pub mod rng;
pub mod sde_sim;
pub mod segment;
pub mod spectral;
pub mod stats;
