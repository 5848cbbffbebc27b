//! Masked mean absolute MLP activations per prompt.
//!
//! For prompt `i` and layer `ℓ` the stored vector is
//! `Σ_t |h_{i,t}| · m_{i,t} / Σ_t m_{i,t}` where `h` is the SwiGLU
//! intermediate and `m` the attention mask. Only the prompt tokens are run
//! through the model; nothing is generated.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{forward, ActivationHook, ByteTokenizer, ModelBundle};
use crate::tensor::Real;

/// Role of a prompt in the selectivity contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Distractor,
}

impl Label {
    pub fn swapped(self) -> Self {
        match self {
            Label::Target => Label::Distractor,
            Label::Distractor => Label::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub label: Label,
    /// Reference answer, when the prompt is also used for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>) -> Self {
        Self { prompts }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.prompts.iter().filter(|p| p.label == label).count()
    }

    pub fn with_label(&self, label: Label) -> PromptSet {
        PromptSet::new(self.prompts.iter().filter(|p| p.label == label).cloned().collect())
    }

    /// Ids must be unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.prompts {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::DegenerateInput(format!("duplicate prompt id `{}`", p.id)));
            }
        }
        Ok(())
    }
}

/// Dataset-wide activation statistics, `N × L × d_ff`, row-major
/// `[prompt][layer][neuron]`. Values are stored in 64-bit regardless of the
/// model precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTensor {
    pub n_prompts: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub labels: Vec<Label>,
    /// Identifies the model the activations came from (set by the caller,
    /// typically a content hash of the weight file).
    pub source_model_hash: String,
    pub data: Vec<f64>,
}

impl ActivationTensor {
    pub fn new(
        n_layers: usize,
        d_ff: usize,
        labels: Vec<Label>,
        data: Vec<f64>,
        source_model_hash: String,
    ) -> Result<Self> {
        let t = Self {
            n_prompts: labels.len(),
            n_layers,
            d_ff,
            labels,
            source_model_hash,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.n_prompts * self.n_layers * self.d_ff;
        if self.data.len() != want || self.labels.len() != self.n_prompts {
            return Err(shape_err(
                "ActivationTensor",
                format!("{}x{}x{}", self.n_prompts, self.n_layers, self.d_ff),
                format!("{} values, {} labels", self.data.len(), self.labels.len()),
            ));
        }
        if let Some(i) = self.data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::DegenerateInput(format!(
                "activation entry {i} is negative or non-finite"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, prompt: usize, layer: usize, neuron: usize) -> f64 {
        self.data[(prompt * self.n_layers + layer) * self.d_ff + neuron]
    }

    /// Activation vector of one prompt at one layer.
    pub fn row(&self, prompt: usize, layer: usize) -> &[f64] {
        let start = (prompt * self.n_layers + layer) * self.d_ff;
        &self.data[start..start + self.d_ff]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Checks that this tensor can be used with a model/plan of the given
    /// shape.
    pub fn check_shape(&self, n_layers: usize, d_ff: usize) -> Result<()> {
        if self.n_layers != n_layers || self.d_ff != d_ff {
            return Err(shape_err(
                "activations vs model",
                format!("L={} d_ff={}", self.n_layers, self.d_ff),
                format!("L={n_layers} d_ff={d_ff}"),
            ));
        }
        Ok(())
    }
}

/// Masked mean of `|h|` over positions: `Σ_t |h_t|·m_t / Σ_t m_t`,
/// accumulated in 64-bit. `per_token[t]` is the activation vector at
/// position `t`.
pub fn masked_mean_abs<T: Real>(per_token: &[&[T]], mask: &[u8]) -> Result<Vec<f64>> {
    if per_token.len() != mask.len() {
        return Err(shape_err(
            "masked_mean_abs",
            format!("{} positions", per_token.len()),
            format!("{} mask entries", mask.len()),
        ));
    }
    let valid = mask.iter().filter(|&&m| m != 0).count();
    if valid == 0 {
        return Err(Error::DegenerateInput("attention mask has no valid tokens".into()));
    }
    let width = per_token.first().map_or(0, |r| r.len());
    let mut sum = vec![0.0f64; width];
    for (row, &m) in per_token.iter().zip(mask) {
        if m == 0 {
            continue;
        }
        for (s, v) in sum.iter_mut().zip(row.iter()) {
            *s += v.as_f64().abs();
        }
    }
    let denom = valid as f64;
    Ok(sum.into_iter().map(|s| s / denom).collect())
}

/// Accumulates `|h|` over valid positions for one prompt.
struct MaskedAbsSum<'a> {
    mask: &'a [u8],
    sums: Vec<Vec<f64>>,
}

impl<T: Real> ActivationHook<T> for MaskedAbsSum<'_> {
    fn on_mlp_activation(&mut self, layer: usize, position: usize, h: &mut [T]) {
        if self.mask[position] == 0 {
            return;
        }
        for (s, v) in self.sums[layer].iter_mut().zip(h.iter()) {
            *s += v.as_f64().abs();
        }
    }
}

/// Right-pads tokenized prompts with `pad_id` to the longest length;
/// returns `(tokens, mask)` per prompt.
pub fn pad_batch(batch: &[Vec<u32>], pad_id: u32) -> Vec<(Vec<u32>, Vec<u8>)> {
    let max_len = batch.iter().map(Vec::len).max().unwrap_or(0);
    batch
        .iter()
        .map(|ids| {
            let mut toks = ids.clone();
            let mut mask = vec![1u8; ids.len()];
            toks.resize(max_len, pad_id);
            mask.resize(max_len, 0);
            (toks, mask)
        })
        .collect()
}

/// Mean activation rows (`L × d_ff`, flattened) for one padded prompt.
pub fn capture_prompt<T: Real>(
    model: &ModelBundle<T>,
    tokens: &[u32],
    mask: &[u8],
) -> Result<Vec<f64>> {
    let valid = mask.iter().filter(|&&m| m != 0).count();
    if valid == 0 {
        return Err(Error::DegenerateInput("prompt has no valid tokens".into()));
    }
    let c = &model.config;
    let mut sink = MaskedAbsSum {
        mask,
        sums: vec![vec![0.0; c.d_ff]; c.n_layers],
    };
    forward(model, tokens, mask, Some(&mut sink))?;
    let denom = valid as f64;
    Ok(sink
        .sums
        .into_iter()
        .flat_map(|layer| layer.into_iter().map(move |s| s / denom))
        .collect())
}

/// Tokenizes every prompt with the `[bos] + bytes` template, right-pads the
/// batch and captures each prompt in order.
pub fn capture_activations<T: Real>(
    model: &ModelBundle<T>,
    prompts: &PromptSet,
) -> Result<ActivationTensor> {
    let batch = tokenize_prompts(model, prompts)?;
    let mut data = Vec::with_capacity(prompts.len() * model.config.n_layers * model.config.d_ff);
    for (toks, mask) in &batch {
        data.extend(capture_prompt(model, toks, mask)?);
    }
    ActivationTensor::new(
        model.config.n_layers,
        model.config.d_ff,
        prompts.prompts.iter().map(|p| p.label).collect(),
        data,
        String::new(),
    )
}

/// Tokenized and right-padded prompt batch, validated for capture.
pub fn tokenize_prompts<T: Real>(
    model: &ModelBundle<T>,
    prompts: &PromptSet,
) -> Result<Vec<(Vec<u32>, Vec<u8>)>> {
    prompts.validate()?;
    let ids: Vec<Vec<u32>> = prompts
        .prompts
        .iter()
        .map(|p| {
            if p.text.is_empty() {
                Err(Error::DegenerateInput(format!("prompt `{}` is empty", p.id)))
            } else {
                Ok(ByteTokenizer::encode_prompt(&p.text))
            }
        })
        .collect::<Result<_>>()?;
    Ok(pad_batch(&ids, model.config.pad_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Matrix;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            vocab_size: 260,
            norm_eps: 1e-6,
            rope_theta: 10000.0,
            max_seq_len: 32,
            bos_id: 1,
            eos_id: 2,
            pad_id: 0,
        }
    }

    fn prompt(id: &str, text: &str, label: Label) -> Prompt {
        Prompt {
            id: id.into(),
            text: text.into(),
            label,
            gold: None,
        }
    }

    #[test]
    fn hand_masked_mean() {
        let rows: [&[f64]; 3] = [&[0.2], &[-0.4], &[9.9]];
        let m = masked_mean_abs(&rows, &[1, 1, 0]).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15);
        assert!(matches!(
            masked_mean_abs(&rows, &[0, 0, 0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn constant_field_gives_abs_constant() {
        // Identical embeddings, no attention output and identical neuron rows
        // make h the same at every position and neuron.
        let mut c1 = cfg();
        c1.n_layers = 1;
        let mut m = ModelBundle::<f64>::random(c1, 4, 1.0).unwrap();
        let e = m.embed.row(0).to_vec();
        for r in 0..m.embed.rows() {
            m.embed.row_mut(r).copy_from_slice(&e);
        }
        let l = &mut m.layers[0];
        l.attn_o = Matrix::zeros(8, 8);
        let (g0, u0) = (l.mlp_gate.row(0).to_vec(), l.mlp_up.row(0).to_vec());
        for r in 0..12 {
            l.mlp_gate.row_mut(r).copy_from_slice(&g0);
            l.mlp_up.row_mut(r).copy_from_slice(&u0);
        }
        let xn = crate::tensor::rmsnorm(&e, &l.norm_mlp, 1e-6).unwrap();
        let c = crate::tensor::silu(crate::tensor::dot(&g0, &xn)) * crate::tensor::dot(&u0, &xn);
        assert!(c != 0.0);
        let set = PromptSet::new(vec![prompt("a", "hello", Label::Target)]);
        let a = capture_activations(&m, &set).unwrap();
        for &v in &a.data {
            assert!((v - c.abs()).abs() <= 1e-15 * c.abs(), "{v} vs {c}");
        }
    }

    #[test]
    fn identical_prompts_identical_rows_and_padding_invariance() {
        let m = ModelBundle::<f32>::random(cfg(), 9, 1.0).unwrap();
        let set = PromptSet::new(vec![
            prompt("a", "abc", Label::Target),
            prompt("b", "abc", Label::Distractor),
            prompt("c", "a much longer prompt", Label::Target),
        ]);
        let a = capture_activations(&m, &set).unwrap();
        assert_eq!(a.row(0, 0), a.row(1, 0));
        assert_eq!(a.row(0, 1), a.row(1, 1));
        // Captured alone (no padding) the row is bit-identical.
        let solo = capture_activations(&m, &PromptSet::new(vec![prompt("a", "abc", Label::Target)])).unwrap();
        assert_eq!(solo.row(0, 0), a.row(0, 0));
        assert_eq!(solo.row(0, 1), a.row(0, 1));
        assert!(a.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn reorder_permutes_rows() {
        let m = ModelBundle::<f32>::random(cfg(), 11, 1.0).unwrap();
        let p = vec![
            prompt("a", "xy", Label::Target),
            prompt("b", "hello", Label::Distractor),
        ];
        let a = capture_activations(&m, &PromptSet::new(p.clone())).unwrap();
        let b = capture_activations(&m, &PromptSet::new(vec![p[1].clone(), p[0].clone()])).unwrap();
        assert_eq!(a.row(0, 1), b.row(1, 1));
        assert_eq!(a.row(1, 0), b.row(0, 0));
        assert_eq!(b.labels, [Label::Distractor, Label::Target]);
    }

    #[test]
    fn empty_prompt_and_duplicates_rejected() {
        let m = ModelBundle::<f32>::random(cfg(), 1, 1.0).unwrap();
        let set = PromptSet::new(vec![prompt("a", "", Label::Target)]);
        assert!(matches!(capture_activations(&m, &set), Err(Error::DegenerateInput(_))));
        let set = PromptSet::new(vec![prompt("a", "x", Label::Target), prompt("a", "y", Label::Target)]);
        assert!(capture_activations(&m, &set).is_err());
        assert!(capture_prompt(&m, &[0, 0], &[0, 0]).is_err());
    }

    #[test]
    fn shape_cross_check() {
        let t = ActivationTensor::new(1, 32, vec![Label::Target], vec![0.0; 32], String::new()).unwrap();
        assert!(t.check_shape(1, 16).is_err());
        assert!(t.check_shape(1, 32).is_ok());
    }
}
