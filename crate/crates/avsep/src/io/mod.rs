//! On-disk formats: wav audio, visual feature streams, dataset manifests,
//! checkpoints, and the run configuration file.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod tables;
pub mod wav;
