//! Command implementations behind the `stochseq` binary.

pub mod anticipate;
pub mod commands;
pub mod config;
pub mod evaluate;
pub mod record;
pub mod report;
pub mod train;
