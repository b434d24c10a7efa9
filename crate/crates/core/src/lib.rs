//! Weakly supervised spatio-temporal action detection with multiple
//! instance learning and an uncertainty-weighted bag loss.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: boxes, tubelets, tubes and their overlaps.
//! - [`mil`]: bag pooling, bag cross-entropy, the uncertainty loss and gradients.
//! - [`model`]: a linear tubelet classifier with an uncertainty head, bag
//!   sampling and momentum SGD.
//! - [`synthgen`]: synthetic video worlds with a simulated noisy person detector.
//! - [`linking`]: greedy online linking of scored tubelets into tubes.
//! - [`eval`]: Frame AP and Video AP.
//! - [`study`]: experiment runner for the ablation and sweep studies.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod linking;
pub mod mil;
pub mod model;
pub mod study;
pub mod synthgen;

pub use error::{Error, Result};
