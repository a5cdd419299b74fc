//! Configuration, data preparation and the commands behind the CLI.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod split;
pub mod synth;

pub use config::{Provider, RunConfig};
