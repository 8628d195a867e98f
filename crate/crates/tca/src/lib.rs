//! File formats, synthetic data and command-line plumbing around `tca-core`.

pub mod commands;
pub mod config;
pub mod embed;
pub mod error;
pub mod format;
pub mod json;
pub mod synth;

pub use error::{TcaError, TcaResult};
pub use tca_core;
