//! Command-line front end and read-only HTTP API for PathwayForge runs.

pub mod args;
pub mod commands;
pub mod server;
