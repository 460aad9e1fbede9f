//! A self-contained laboratory for studying parameter corruption and
//! fine-tuning recovery in compact bidirectional transformer encoders.
//!
//! The crate pre-trains toy encoder checkpoints with masked-language
//! modeling, corrupts designated layer ranges (LayerNorm weights to 1.0,
//! other weights Kaiming-uniform, biases to zero), fine-tunes or linearly
//! probes the result on classification tasks, and quantifies recovery with
//! weighted F1, outlier flags, and t-SNE feature projections.

pub mod error;
pub mod corruption;
pub mod encoder;
pub mod tensor;

pub use error::{Error, Result};
