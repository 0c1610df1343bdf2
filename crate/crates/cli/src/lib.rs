//! Experiment runner for the FCAE + DBC pipeline: config resolution, run
//! directories and the stages behind each `dbc` subcommand.

pub mod commands;
pub mod config;
pub mod run;
