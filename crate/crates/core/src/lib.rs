//! Prototype-based noisy-label learning over precomputed embeddings.
//!
//! The pipeline works on a [`dataset::Dataset`] of fixed embedding vectors:
//!
//! 1. [`metrics`] computes per-class cosine similarity, proximity and logit
//!    confidence;
//! 2. [`prototypes`] picks difficult-class and anomaly prototypes per class and
//!    turns prototype similarity into pseudo-labels;
//! 3. [`trainer`] optionally replaces noisy labels with prototype-consistent
//!    ones and trains a softmax head on the weighted three-target loss;
//! 4. [`benchmark`] generates planted data and runs comparison grids.

pub mod benchmark;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod prototypes;
pub mod trainer;

pub use error::{Error, Result};
