use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. All layers share one `d_ff`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub norm_eps: f64,
    pub rope_theta: f64,
    pub max_seq_len: usize,
    pub bos_id: u32,
    pub eos_id: u32,
    pub pad_id: u32,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.n_heads == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return bad(format!("all sizes must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return bad(format!("norm_eps must be > 0, got {}", self.norm_eps));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return bad(format!("rope_theta must be > 0, got {}", self.rope_theta));
        }
        for (name, id) in [("bos", self.bos_id), ("eos", self.eos_id), ("pad", self.pad_id)] {
            if id as usize >= self.vocab_size {
                return bad(format!("{name} id {id} outside vocabulary {}", self.vocab_size));
            }
        }
        if self.eos_id == self.pad_id {
            return bad(format!("eos and pad share id {}", self.eos_id));
        }
        Ok(())
    }
}
