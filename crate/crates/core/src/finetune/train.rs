use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ByteTokenizer, ModelBundle};
use crate::rng::SplitMix64;
use crate::tensor::Real;

use super::backward::{backward_impl, Dropout, TrainableSet};
use super::lora::{attach_adapters, LoraAdapter};
use super::LoraConfig;

/// Supervised pair; only the completion (and the closing EOS) is scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub completion: String,
}

impl Example {
    /// `[bos] + prompt + completion + [eos]` and the matching loss mask.
    pub fn encode(&self, eos: u32) -> (Vec<u32>, Vec<u8>) {
        let mut toks = ByteTokenizer::encode_prompt(&self.prompt);
        let n_prompt = toks.len();
        toks.extend(ByteTokenizer::encode(&self.completion));
        toks.push(eos);
        let mut mask = vec![0u8; n_prompt];
        mask.resize(toks.len(), 1);
        (toks, mask)
    }
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8` and no schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update of `params` (flattened, in a fixed order) from `grads`.
    pub fn update<'a, T: Real>(&mut self, params: impl Iterator<Item = &'a mut T>, grads: impl Iterator<Item = T>) {
        self.step += 1;
        let b1t = 1.0 - Float::powi(self.beta1, self.step as i32);
        let b2t = 1.0 - Float::powi(self.beta2, self.step as i32);
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = g.as_f64();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *p -= T::from_f64(self.lr * m_hat / (Float::sqrt(v_hat) + self.eps));
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub adapter: LoraAdapter<T>,
    /// Mean loss of each optimizer step's batch.
    pub step_losses: Vec<f64>,
    /// Mean loss over each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains fresh adapters on `data`. Shuffling, dropout and initialization
/// are all derived from `seed`, so equal inputs give identical adapters.
pub fn train_lora<T: Real>(
    model: &ModelBundle<T>,
    data: &[Example],
    config: &LoraConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate()?;
    let mut adapter = attach_adapters(model, config, seed)?;
    let encoded: Vec<(Vec<u32>, Vec<u8>)> = data.iter().map(|e| e.encode(model.config.eos_id)).collect();
    let n_params = adapter.param_count() as usize;
    let mut opt = Adam::new(config.learning_rate, n_params);
    let mut drop_rng = SplitMix64::derive(seed, 0xd20);
    let set = TrainableSet::lora();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        SplitMix64::derive(seed, 0x5_0000 + epoch as u64).shuffle(&mut order);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc_a: Vec<Vec<T>> = adapter.factors.iter().map(|f| vec![T::zero(); f.a.data().len()]).collect();
            let mut acc_b: Vec<Vec<T>> = adapter.factors.iter().map(|f| vec![T::zero(); f.b.data().len()]).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (toks, mask) = &encoded[i];
                let dropout = Dropout {
                    rate: config.dropout,
                    rng: &mut drop_rng,
                };
                let g = backward_impl(model, Some(&adapter), toks, mask, &set, Some(dropout))?;
                batch_loss += g.loss;
                for (acc, ga) in acc_a.iter_mut().zip(&g.lora_a) {
                    for (s, &v) in acc.iter_mut().zip(ga.data()) {
                        *s += v;
                    }
                }
                for (acc, gb) in acc_b.iter_mut().zip(&g.lora_b) {
                    for (s, &v) in acc.iter_mut().zip(gb.data()) {
                        *s += v;
                    }
                }
            }
            let inv = T::from_f64(1.0 / batch.len() as f64);
            let params = adapter
                .factors
                .iter_mut()
                .flat_map(|f| f.a.data_mut().iter_mut().chain(f.b.data_mut().iter_mut()));
            let grads = acc_a
                .iter()
                .zip(&acc_b)
                .flat_map(|(a, b)| a.iter().chain(b.iter()))
                .map(|&v| v * inv);
            opt.update(params, grads);
            step_losses.push(batch_loss / batch.len() as f64);
            epoch_sum += batch_loss;
        }
        epoch_losses.push(epoch_sum / encoded.len() as f64);
    }
    Ok(TrainOutcome {
        adapter,
        step_losses,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use alloc::format;

    fn model() -> ModelBundle<f32> {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 16,
            d_ff: 16,
            n_heads: 2,
            vocab_size: 262,
            norm_eps: 1e-6,
            rope_theta: 10000.0,
            max_seq_len: 16,
            bos_id: 1,
            eos_id: 2,
            pad_id: 0,
        };
        ModelBundle::random(cfg, 4, 1.0).unwrap()
    }

    fn data() -> Vec<Example> {
        (0..10)
            .map(|i| Example {
                prompt: format!("{i}>"),
                completion: format!("{}", (i + 1) % 10),
            })
            .collect()
    }

    fn cfg(lr: f64) -> LoraConfig {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.1,
            learning_rate: lr,
            epochs: 2,
            batch_size: 4,
            targets: LoraConfig::math_preset().targets,
        }
    }

    #[test]
    fn encode_masks_completion() {
        let (t, m) = Example {
            prompt: "ab".into(),
            completion: "c".into(),
        }
        .encode(2);
        assert_eq!(t, [1, 3 + 97, 3 + 98, 3 + 99, 2]);
        assert_eq!(m, [0, 0, 0, 1, 1]);
    }

    #[test]
    fn zero_lr_leaves_adapters_untouched() {
        let m = model();
        let out = train_lora(&m, &data(), &cfg(0.0), 1).unwrap();
        let fresh = attach_adapters(&m, &cfg(0.0), 1).unwrap();
        assert_eq!(out.adapter, fresh);
        assert_eq!(out.step_losses.len(), 2 * 3);
    }

    #[test]
    fn deterministic_and_learning() {
        let m = model();
        let a = train_lora(&m, &data(), &LoraConfig { epochs: 6, ..cfg(1e-2) }, 7).unwrap();
        let b = train_lora(&m, &data(), &LoraConfig { epochs: 6, ..cfg(1e-2) }, 7).unwrap();
        assert_eq!(a.adapter, b.adapter);
        assert_eq!(a.step_losses, b.step_losses);
        assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0], "{:?}", a.epoch_losses);
    }

    #[test]
    fn empty_dataset() {
        assert!(matches!(train_lora(&model(), &[], &cfg(0.1), 1), Err(Error::EmptyDataset)));
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Adam::new(0.1, 2);
        let mut p = [1.0f64, -1.0];
        opt.update(p.iter_mut(), [3.0f64, -0.5].into_iter());
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }
}
