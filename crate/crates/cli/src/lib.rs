//! Experiment runner: configuration, presets and the command pipeline
//! behind the `fpl` binary.

pub mod config;
pub mod run;
