//! Library side of the `confloop` binary: configuration and subcommands.

pub mod commands;
pub mod config;
