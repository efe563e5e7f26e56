//! Files, configuration, parallel evaluation and the command implementations behind the
//! `vamp` binary. The algorithms live in [`vamp_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod format;
pub mod metrics;
pub mod parallel;

pub use error::{Result, VampError};
pub use vamp_core as core;
