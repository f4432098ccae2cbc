//! Self-supervised pretraining by joint prediction of image rotation and
//! image-enhancement degree.
//!
//! The crate is organised bottom-up:
//!
//! * [`imgops`]: bit-exact 8-bit image transforms (rotation, five enhancements)
//! * [`dataio`]: CIFAR binary ingestion, splits, channel statistics, PPM export
//! * [`pretext`]: label spaces and pretext batch construction
//! * [`nn`]: tensors, reverse-mode differentiation, initialization, SGD
//! * [`trainer`]: the two-head model, min-norm task weighting and the training loop
//! * [`eval`]: frozen-feature linear probes and reports
//! * [`cli`]: the `ierot` command-line tool

pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod imgops;
pub mod nn;
pub mod pretext;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
