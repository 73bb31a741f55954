//! Dense-retrieval fine-tuning on a small, fully inspectable encoder:
//! contrastive losses with a negative-query penalty, hard-negative mining,
//! optional top-1 mixture-of-experts intermediate layer, and nDCG evaluation.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod mining;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
