//! Desk-scale toolkit for sparse-upcycled mixture-of-experts training with a
//! frozen knowledge-anchor expert and parameter-delta grafting.
//!
//! The pipeline: pretrain a small dense byte-level LM, post-train it to
//! manufacture a parameter delta, upcycle the base into an MoE, continue
//! pretraining on new synthetic languages with the original weights frozen,
//! then graft the delta onto the MoE. Baseline merge strategies (dense
//! averaging, dense delta, MoE averaging) and routing/perplexity analytics
//! reproduce the trade-off directionally on a CPU in minutes.

pub mod kernels;
pub mod tensor;
pub mod tape;
pub mod params;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod surgery;
pub mod checkpoint;
pub mod data;
pub mod trainer;
pub mod analytics;
pub mod config;
pub mod pipeline;

pub use params::ParamStore;
pub use tensor::{KernelError, Real, Result, Tensor};
