//! Hierarchical residual next-frame video prediction.
//!
//! The crate covers the full pipeline: frame ingestion and synthetic data
//! ([`data`]), the generator and conditional patch discriminator, the
//! training objectives, the three-phase trainer and the evaluation harness.

pub mod backbone;
pub mod config;
pub mod container;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluator;
pub mod frames;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
