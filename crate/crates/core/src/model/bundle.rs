use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Matrix, Real};

use super::config::ModelConfig;

/// Linear projections of a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [
        Proj::Q,
        Proj::K,
        Proj::V,
        Proj::O,
        Proj::Gate,
        Proj::Up,
        Proj::Down,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
            Proj::Gate => "gate",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }

    pub fn from_short_name(name: &str) -> Option<Self> {
        // Accept both `gate` and the `gate_proj` spelling used by PEFT configs.
        let name = name.strip_suffix("_proj").unwrap_or(name);
        Proj::ALL.into_iter().find(|p| p.short_name() == name)
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, Proj::Gate | Proj::Up | Proj::Down)
    }

    /// Tensor name inside layer `layer`, e.g. `layers.0.mlp.gate`.
    pub fn tensor_name(self, layer: usize) -> String {
        let block = if self.is_mlp() { "mlp" } else { "attn" };
        format!("layers.{layer}.{block}.{}", self.short_name())
    }
}

/// Weights of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_q: Matrix<T>,
    pub attn_k: Matrix<T>,
    pub attn_v: Matrix<T>,
    pub attn_o: Matrix<T>,
    /// `[d_ff × d_model]`; one row per neuron.
    pub mlp_gate: Matrix<T>,
    /// `[d_ff × d_model]`; one row per neuron.
    pub mlp_up: Matrix<T>,
    /// `[d_model × d_ff]`; one column per neuron.
    pub mlp_down: Matrix<T>,
    pub norm_attn: Vec<T>,
    pub norm_mlp: Vec<T>,
}

impl<T: Real> LayerWeights<T> {
    pub fn proj(&self, p: Proj) -> &Matrix<T> {
        match p {
            Proj::Q => &self.attn_q,
            Proj::K => &self.attn_k,
            Proj::V => &self.attn_v,
            Proj::O => &self.attn_o,
            Proj::Gate => &self.mlp_gate,
            Proj::Up => &self.mlp_up,
            Proj::Down => &self.mlp_down,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> &mut Matrix<T> {
        match p {
            Proj::Q => &mut self.attn_q,
            Proj::K => &mut self.attn_k,
            Proj::V => &mut self.attn_v,
            Proj::O => &mut self.attn_o,
            Proj::Gate => &mut self.mlp_gate,
            Proj::Up => &mut self.mlp_up,
            Proj::Down => &mut self.mlp_down,
        }
    }
}

/// Borrowed view of one named tensor, in manifest order.
#[derive(Debug, Clone)]
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [T],
}

/// Tensor name, actual shape, expected shape.
type ShapeCheck = (String, (usize, usize), (usize, usize));

/// Config plus every weight tensor of a model. Immutable after load; all
/// transformations (pruning, merging, casting) return a new bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub embed: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    /// `[vocab × d_model]`, untied from `embed`.
    pub head: Matrix<T>,
}

impl<T: Real> ModelBundle<T> {
    /// Checks every tensor shape against the config and that all weights are
    /// finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        if self.layers.len() != c.n_layers {
            return Err(shape_err(
                "ModelBundle",
                format!("n_layers {}", c.n_layers),
                format!("{} layers", self.layers.len()),
            ));
        }
        for (name, shape, expected) in self.expected_shapes() {
            if shape != expected {
                return Err(shape_err(
                    "ModelBundle",
                    format!("{name} expected {}x{}", expected.0, expected.1),
                    format!("{}x{}", shape.0, shape.1),
                ));
            }
        }
        for t in self.tensors() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("tensor {} has non-finite entries", t.name)));
            }
        }
        Ok(())
    }

    fn expected_shapes(&self) -> Vec<ShapeCheck> {
        let mut out = Vec::new();
        let names = tensor_names(&self.config);
        let expected = expected_tensor_shapes(&self.config);
        for ((name, shape), exp) in names.into_iter().zip(self.tensor_shapes()).zip(expected) {
            out.push((name, shape, exp));
        }
        out
    }

    fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape).collect()
    }

    /// All tensors in manifest order: `embed`, `head`, `final_norm`, then per
    /// layer the attention projections, MLP projections and the two norms.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut v = Vec::with_capacity(3 + 9 * self.layers.len());
        v.push(mat_ref("embed".into(), &self.embed));
        v.push(mat_ref("head".into(), &self.head));
        v.push(vec_ref("final_norm".into(), &self.final_norm));
        for (i, layer) in self.layers.iter().enumerate() {
            for p in Proj::ALL {
                v.push(mat_ref(p.tensor_name(i), layer.proj(p)));
            }
            v.push(vec_ref(format!("layers.{i}.norm.attn"), &layer.norm_attn));
            v.push(vec_ref(format!("layers.{i}.norm.mlp"), &layer.norm_mlp));
        }
        v
    }

    /// Total number of weight elements.
    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.data.len() as u64).sum()
    }

    /// Parameters held by MLP blocks: `3 · d_model · d_ff · L`.
    pub fn mlp_param_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.mlp_gate.data().len() + l.mlp_up.data().len() + l.mlp_down.data().len()) as u64)
            .sum()
    }

    /// Parameters that take part in a matrix product at every decoding step
    /// (all projections plus the output head; the embedding is a lookup).
    pub fn matmul_param_count(&self) -> u64 {
        let per_layer: u64 = self
            .layers
            .iter()
            .map(|l| Proj::ALL.iter().map(|&p| l.proj(p).data().len() as u64).sum::<u64>())
            .sum();
        per_layer + self.head.data().len() as u64
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        let cv = |v: &Vec<T>| v.iter().map(|&x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        ModelBundle {
            config: self.config.clone(),
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_q: l.attn_q.cast(),
                    attn_k: l.attn_k.cast(),
                    attn_v: l.attn_v.cast(),
                    attn_o: l.attn_o.cast(),
                    mlp_gate: l.mlp_gate.cast(),
                    mlp_up: l.mlp_up.cast(),
                    mlp_down: l.mlp_down.cast(),
                    norm_attn: cv(&l.norm_attn),
                    norm_mlp: cv(&l.norm_mlp),
                })
                .collect(),
            final_norm: cv(&self.final_norm),
            head: self.head.cast(),
        }
    }

    /// Assembles a bundle from named flat tensors (the inverse of
    /// [`tensors`](Self::tensors)). Every expected name must be present with
    /// the shape implied by `config`.
    pub fn from_named(
        config: ModelConfig,
        mut lookup: impl FnMut(&str, (usize, usize)) -> Result<Vec<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut mat = |name: &str, r: usize, cc: usize| -> Result<Matrix<T>> {
            Matrix::from_vec(r, cc, lookup(name, (r, cc))?)
        };
        let embed = mat("embed", c.vocab_size, c.d_model)?;
        let head = mat("head", c.vocab_size, c.d_model)?;
        let final_norm = mat("final_norm", 1, c.d_model)?.into_data();
        let mut layers = Vec::with_capacity(c.n_layers);
        for i in 0..c.n_layers {
            let d = c.d_model;
            let f = c.d_ff;
            layers.push(LayerWeights {
                attn_q: mat(&format!("layers.{i}.attn.q"), d, d)?,
                attn_k: mat(&format!("layers.{i}.attn.k"), d, d)?,
                attn_v: mat(&format!("layers.{i}.attn.v"), d, d)?,
                attn_o: mat(&format!("layers.{i}.attn.o"), d, d)?,
                mlp_gate: mat(&format!("layers.{i}.mlp.gate"), f, d)?,
                mlp_up: mat(&format!("layers.{i}.mlp.up"), f, d)?,
                mlp_down: mat(&format!("layers.{i}.mlp.down"), d, f)?,
                norm_attn: mat(&format!("layers.{i}.norm.attn"), 1, d)?.into_data(),
                norm_mlp: mat(&format!("layers.{i}.norm.mlp"), 1, d)?.into_data(),
            });
        }
        let bundle = Self {
            config,
            embed,
            layers,
            final_norm,
            head,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Gaussian-initialised toy model, used by tests and benchmarks.
    /// Projections use std `scale / sqrt(fan_in)`, norms are ones.
    pub fn random(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, 0x6d6f_64656c);
        let mut gauss = |rows: usize, cols: usize| {
            let std = scale / num_traits::Float::sqrt(cols as f64);
            Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.normal() * std))
        };
        let c = &config;
        let (d, f) = (c.d_model, c.d_ff);
        let embed = gauss(c.vocab_size, d);
        let head = gauss(c.vocab_size, d);
        let layers = (0..c.n_layers)
            .map(|_| LayerWeights {
                attn_q: gauss(d, d),
                attn_k: gauss(d, d),
                attn_v: gauss(d, d),
                attn_o: gauss(d, d),
                mlp_gate: gauss(f, d),
                mlp_up: gauss(f, d),
                mlp_down: gauss(d, f),
                norm_attn: vec![T::one(); d],
                norm_mlp: vec![T::one(); d],
            })
            .collect();
        Ok(Self {
            config,
            embed,
            layers,
            final_norm: vec![T::one(); d],
            head,
        })
    }
}

/// Manifest-order tensor names for a config.
pub(crate) fn tensor_names(c: &ModelConfig) -> Vec<String> {
    let mut v: Vec<String> = vec!["embed".into(), "head".into(), "final_norm".into()];
    for i in 0..c.n_layers {
        for p in Proj::ALL {
            v.push(p.tensor_name(i));
        }
        v.push(format!("layers.{i}.norm.attn"));
        v.push(format!("layers.{i}.norm.mlp"));
    }
    v
}

pub(crate) fn expected_tensor_shapes(c: &ModelConfig) -> Vec<(usize, usize)> {
    let (d, f, vocab) = (c.d_model, c.d_ff, c.vocab_size);
    let mut v = vec![(vocab, d), (vocab, d), (1, d)];
    for _ in 0..c.n_layers {
        v.extend([(d, d), (d, d), (d, d), (d, d), (f, d), (f, d), (d, f), (1, d), (1, d)]);
    }
    v
}

fn mat_ref<T: Real>(name: String, m: &Matrix<T>) -> TensorRef<'_, T> {
    TensorRef {
        name,
        shape: m.shape(),
        data: m.data(),
    }
}

fn vec_ref<T>(name: String, v: &[T]) -> TensorRef<'_, T> {
    TensorRef {
        name,
        shape: (1, v.len()),
        data: v,
    }
}

impl ModelConfig {
    /// Full tensor names in manifest order, matching
    /// [`ModelBundle::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        tensor_names(self)
    }

    /// Shapes implied by this config, in manifest order.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        expected_tensor_shapes(self)
    }
}
