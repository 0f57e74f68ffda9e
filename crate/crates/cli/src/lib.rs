//! Command-line front end: config loading and the `train`, `eval`,
//! `landscape` and `gen-data` subcommands.

pub mod commands;
pub mod config;

pub use config::{load, parse, validate, LoadedConfig, RunConfig};
