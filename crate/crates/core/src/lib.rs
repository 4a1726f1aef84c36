//! Interaction-driven affordance learning in a synthetic indoor world.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod labeling;
pub mod mapping;
pub mod nn;
pub mod policy;
pub mod predictor;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
