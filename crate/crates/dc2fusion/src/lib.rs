//! File formats, datasets, the training loop and the command-line interface
//! around [`dc2fusion_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod train;
pub mod vol3;

pub use error::{Error, ErrorKind, Result};
