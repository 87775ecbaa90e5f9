//! File formats, configuration and the command line for `segtrans-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod manifest;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::RunConfig;
pub use manifest::RunManifest;
