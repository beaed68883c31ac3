//! Command-line pipeline around `vesselda-core`: the raw-float + JSON data
//! container, parameter checkpoints, run configuration and manifests, PNG
//! figures and the subcommands that tie them together.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod container;
pub mod figures;
pub mod manifest;

pub use cli::run_cli;
