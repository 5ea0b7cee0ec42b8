//! Command-line front end for the sequential position-encoding crate:
//! config loading, model assembly, and the train / eval / precompute /
//! heatmap / gradcheck subcommands.  The binary in `main.rs` is a thin
//! argument-parsing shell over these modules so integration tests can
//! drive the same code paths in-process.

pub mod build;
pub mod commands;
pub mod config;
