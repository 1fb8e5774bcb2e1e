//! Command-line pipeline around the `adacal` toolkit: train, convert, search
//! burst and compression plans, fit the exit rule, evaluate and report.

pub mod commands;
pub mod config;
pub mod error;
pub mod stages;

pub use commands::{run, Command};
pub use config::{EnergyTarget, Overrides, RunConfig, SensitivityTarget};
pub use error::{CliError, ErrorKind, Stage};
