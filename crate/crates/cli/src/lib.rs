//! Scenario files in, CSV tables, checkpoints and plots out.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod plots;

pub use commands::{compare, run, simulate, sweep, Options};
pub use config::ScenarioConfig;
pub use error::CliError;

/// The bundled schema reference for scenario files.
pub const SCHEMA: &str = include_str!("../scenarios/SCHEMA.md");
