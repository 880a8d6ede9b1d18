//! File formats, configuration, experiment drivers and the command line for
//! the rotation-invariant ViT re-identification core.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ppm;
pub mod report;
pub mod run;

pub use rottrans_core as core;
