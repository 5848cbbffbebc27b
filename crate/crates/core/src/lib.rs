//! Activation-selectivity structural pruning for SwiGLU decoder-only
//! transformers.
//!
//! The crate is `no_std` (with `alloc`) and carries every algorithmic piece
//! of the pipeline: dense kernels, the reference transformer, masked
//! activation capture, selectivity scoring, granularity-aware pruning,
//! greedy generation with trap detection, LoRA fine-tuning with manual
//! backpropagation, evaluation metrics and the planted-specialization lab.
//! File formats, the CLI and the sweep harness live in the `neurosel` crate.
#![no_std]
#![warn(rust_2018_idioms, unused_qualifications)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod capture;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod generator;
pub mod model;
pub mod pruner;
pub mod rng;
pub mod selectivity;
pub mod synthlab;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Real};
