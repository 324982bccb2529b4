//! Command orchestration: configuration, run records, the per-command
//! artifact flow and the GPS mode monitor.

pub mod commands;
pub mod config;
pub mod monitor;
pub mod record;
