//! IO, training driver and command-line surface for the D-PBN auto-encoder
//! in [`dpbn_core`].
//!
//! - [`data`]: IDX loading, class subsets, dither, logit transform, FFT shifts, batch cache
//! - [`fit`]: mini-batch training loop and CSV training logs
//! - [`model_file`]: checksummed binary model files
//! - [`config`]: JSON run configuration
//! - [`commands`]: the `dpbn` subcommands

pub mod commands;
pub mod config;
pub mod data;
pub mod fit;
pub mod model_file;
pub mod rng;

pub use dpbn_core as core;
