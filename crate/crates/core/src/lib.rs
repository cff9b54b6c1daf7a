//! Affine-scaled attention and its baselines (softmax, off-by-one, learnable
//! sink, output gating) inside a small trainable decoder-only transformer,
//! with exact gradients and attention/stability diagnostics.

pub mod activations;
pub mod attention;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod stability;
pub mod training;

pub use error::{Error, Result};
