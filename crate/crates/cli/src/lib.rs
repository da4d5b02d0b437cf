//! Experiment driver: configuration, the subcommand pipelines and the
//! acceptance checks behind `cones verify`.

pub mod commands;
pub mod config;
pub mod exit;
pub mod pipeline;
pub mod verify;
