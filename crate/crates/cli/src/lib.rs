//! Experiment runner for the basinlab library: TOML configs, manifests,
//! replay and plots.

pub mod config;
pub mod experiments;
pub mod plot;
pub mod runner;
