//! Structured pruning of SwiGLU / grouped-query-attention transformers
//! guided by a sign-gradient neural tangent kernel.
//!
//! The pipeline scores every weight by `|df/dW * W|`, sums those scores
//! over MLP hidden units and KV groups, splits a global sparsity budget
//! between MLP and attention with a ratio `gamma`, ranks units globally,
//! aligns the surviving MLP widths to multiples of 8, and removes the
//! pruned units. Calibration batches are chosen by the KL divergence they
//! induce between the dense and pruned model.

pub mod allocator;
pub mod calib;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod prune;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
