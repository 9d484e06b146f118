//! Command-line front end: experiment configs, runs, checkpoint inspection and
//! slice export. The `fttnn` binary is a thin wrapper over [`commands`].

pub mod commands;
pub mod config;
