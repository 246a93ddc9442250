//! Dual-stream image/text classifier for cross-scene hyperspectral imagery.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`ndgrad`]: dense tensors with reverse-mode automatic differentiation
//! - [`hsidata`]: scene containers, patch extraction, synthetic scene pairs
//! - [`textpipe`]: byte-pair tokenizer and class prompt assembly
//! - [`imenc`] / [`txtenc`]: the two encoders
//! - [`losses`]: cross-entropy plus the contrastive alignment objectives
//! - [`params`]: the named parameter store and its on-disk format
//! - [`trainer`]: batches, Adam, the training loop, metrics, grids
//! - [`cli`]: the command-line surface

pub mod cli;
pub mod hsidata;
pub mod imenc;
pub mod losses;
pub mod params;
pub mod ndgrad;
pub mod textpipe;
pub mod trainer;
pub mod txtenc;
pub(crate) mod stream;
