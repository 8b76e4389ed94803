//! Dual-sequence scanpath model for eye-tracking-while-reading data: corpus handling,
//! embeddings, the attention-based next-fixation model, training, generation and evaluation.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod model;
pub mod scangen;
pub mod train;

pub use error::{Error, Result};
