//! Learning with noisy labels through a doubly transitional loss.
//!
//! An explicit path models label noise with a column-stochastic transition
//! matrix re-estimated by EM, an implicit path maps true-label logits to
//! noisy-label logits with a constrained planar flow, and both share one
//! true-label classifier on top of a small sentence encoder.

pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod noise;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
