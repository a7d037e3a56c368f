//! Command-line pipeline around the `freqmark` library: config handling, run manifests and
//! the individual stages.

pub mod commands;
pub mod config;
pub mod manifest;
