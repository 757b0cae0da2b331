//! Command-line pipeline: configuration, checkpoints, gradient checks and
//! the subcommands built on them.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod gradcheck;
