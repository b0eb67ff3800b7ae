//! Command line, configuration files, checkpoints and experiment runners
//! around `ulast-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod formats;
pub mod gradcheck;
pub mod parallel;
pub mod run;

pub use error::{Error, Result};
