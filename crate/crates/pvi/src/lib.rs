//! File formats, configuration and commands for the `pvi` tool.

pub mod cli;
pub mod config;
pub mod csvio;
pub mod demos;
pub mod manifest;
pub mod run;
