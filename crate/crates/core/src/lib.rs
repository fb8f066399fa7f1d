//! Desk-scale two-stage multimodal instruction tuning.
//!
//! A from-scratch autodiff engine drives a toy vision transformer, a two-layer
//! cross-modal projector and a causal character-level decoder. Training runs
//! as declarative stages (frozen, LoRA or fully tuned groups) over a synthetic
//! geometry corpus, with attention-rollout diagnostics and a zero-shot
//! multiple-choice evaluation harness.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod geo;
pub mod lora;
pub mod model;
pub mod rollout;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
