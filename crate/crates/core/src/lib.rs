//! Classification as a discrete-state denoising diffusion over class labels.
//!
//! A model learns concrete-score ratios between label probabilities under a
//! uniform-rate forward noising process; posteriors are recovered by simulating
//! the reverse chain from the uniform distribution.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod train;
pub mod transition;

pub use error::{Error, Result};
