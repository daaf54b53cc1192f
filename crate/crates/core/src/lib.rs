//! Generative multi-behavior sequential recommendation.
//!
//! Items and behaviors are fused into one token per interaction. A causal
//! transformer predicts the next `(item, behavior)` pair, with two learned
//! attention biases: one from intensity-stratified aggregation of history
//! (exploration versus commitment behaviors) and one from pairwise
//! transition relations (item consistency, behavior transitions, elapsed
//! time and context matching).

pub mod context;
pub mod dataio;
pub mod diagnostics;
pub mod embedding;
mod error;
pub mod evaluator;
pub mod hba;
pub mod model;
pub mod numerics;
pub mod schema;
pub mod trainer;
pub mod tre;

pub use error::{Error, Result};
