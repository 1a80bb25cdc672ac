//! Batch front end: TOML problem files in, CSV reports out.

pub mod commands;
pub mod config;
pub mod output;
