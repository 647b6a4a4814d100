//! Command-line front end: data generation, noise injection, training,
//! evaluation, and ablation grids, each leaving a `config.json` behind.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod experiment;

pub use cli::{run, Cli};
pub use config::ExperimentConfig;
