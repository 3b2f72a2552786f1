//! Library side of the `lix` command: configuration, subcommands and
//! ablation sweeps, shared by the binary and the integration tests.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod exit;
pub mod output;
