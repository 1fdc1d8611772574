//! Library surface of the CLI so the command layer is testable in-process.

pub mod commands;
pub mod config;
