//! Low-rank adapters and their training loop.
//!
//! An adapted projection computes `W·x + (α/r)·B·(A·x)`. Gradients come from
//! a hand-written reverse pass over the same kernels the forward pass uses.

mod backward;
mod lora;
mod train;

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Proj;

pub use backward::{backward, loss, Gradients, TrainableSet};
pub use lora::{attach_adapters, merge_adapters, AdapterFactors, LoraAdapter};
pub use train::{train_lora, Adam, Example, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Examples per optimizer step, reached by gradient accumulation.
    pub batch_size: usize,
    pub targets: Vec<String>,
}

fn all_projections() -> Vec<String> {
    ["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl LoraConfig {
    pub fn code_preset() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.10,
            learning_rate: 2e-4,
            epochs: 2,
            batch_size: 16,
            targets: all_projections(),
        }
    }

    pub fn math_preset() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.10,
            learning_rate: 2e-5,
            epochs: 2,
            batch_size: 8,
            targets: all_projections(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "code" => Some(Self::code_preset()),
            "math" => Some(Self::math_preset()),
            _ => None,
        }
    }

    /// `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn target_projs(&self) -> Result<Vec<Proj>> {
        let mut out: Vec<Proj> = Vec::new();
        for t in &self.targets {
            let p = Proj::from_short_name(t).ok_or_else(|| Error::UnknownTarget(t.clone()))?;
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.rank == 0 {
            return bad("LoRA rank must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("LoRA alpha must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("LoRA dropout must lie in [0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if self.targets.is_empty() {
            return bad("at least one adapter target is required");
        }
        self.target_projs().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let c = LoraConfig::code_preset();
        assert_eq!((c.rank, c.alpha, c.batch_size), (16, 32.0, 16));
        assert_eq!(c.scale(), 2.0);
        let m = LoraConfig::math_preset();
        assert_eq!((m.rank, m.alpha, m.learning_rate, m.batch_size), (8, 16.0, 2e-5, 8));
        assert_eq!(m.scale(), 2.0);
        assert_eq!(m.target_projs().unwrap(), Proj::ALL);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_target() {
        let mut c = LoraConfig::math_preset();
        c.targets.push("lm_head".into());
        assert_eq!(c.validate(), Err(Error::UnknownTarget("lm_head".into())));
    }
}
