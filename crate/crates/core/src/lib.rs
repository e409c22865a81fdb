//! Spatial-relation VQA benchmark construction, hallucination perturbation
//! tests, and localize-before-answer decoding on a toy grounded transformer.

pub mod corpus;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod perturbation;
pub mod seed;
pub mod self_prompting;

pub use error::{Error, Result};
