//! Experiment runner behind the `asp-vision` command.

pub mod config;
pub mod experiments;
pub mod imageio;

pub use config::ExperimentConfig;
pub use experiments::RunOutcome;
