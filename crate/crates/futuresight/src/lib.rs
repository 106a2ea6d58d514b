//! Std companion to `futuresight-core`: file formats, binary checkpoints,
//! the training run driver, the HTTP service and the command line.

pub mod checkpoint;
pub mod cli;
mod error;
pub mod formats;
pub mod runner;
pub mod service;

pub use error::{Error, Result};
