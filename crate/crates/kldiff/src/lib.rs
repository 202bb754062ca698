//! Filesystem side of kldiff: configuration files, checkpoints, datasets,
//! PPM images, external token embeddings and the subcommand implementations
//! used by the `kldiff` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod ppm;

pub use error::{CheckpointError, Error, Result};
