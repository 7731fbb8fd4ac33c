//! Dataset generation, training and SNR-sweep evaluation for the `qsine`
//! command-line tool.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod records;

pub use error::{HarnessError, Result};
