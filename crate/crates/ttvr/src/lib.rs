//! Thermal-to-visible face reconstruction under simulated atmospheric turbulence.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod projection;
pub mod trainer;
pub mod turbulence;
pub mod verification;

pub use ttvr_core as core;
