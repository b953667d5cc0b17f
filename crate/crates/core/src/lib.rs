//! Semantic-preserving adversarial attacks and training: a differentiable
//! attribute manipulator and an l-infinity noise generator optimized jointly
//! against a classifier.

pub mod attack;
pub mod classifier;
pub mod data;
pub mod error;
pub mod generator;
pub mod harness;
pub mod manipulator;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
