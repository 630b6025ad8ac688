//! Command-line front end of `weakpose`.
//!
//! Every command that writes files also writes a [`manifest::RunManifest`]
//! holding the resolved configuration and seeds. Exit codes: 0 success,
//! 1 gradient check over tolerance, 2 usage/config/io, 3 training divergence,
//! 4 data validation.

pub mod commands;
pub mod manifest;

pub use commands::{run, Cli};
