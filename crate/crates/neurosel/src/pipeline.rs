//! Parallel drivers around the core algorithms.

use std::collections::HashMap;
use std::time::Instant;

use neurosel_core::capture::{capture_prompt, tokenize_prompts, ActivationTensor, PromptSet};
use neurosel_core::eval::{judge, mean_similarity, EvalSettings, TokenCosine, Transcript};
use neurosel_core::finetune::LoraAdapter;
use neurosel_core::generator::{generate_text, GenerationConfig, StopCriterion};
use neurosel_core::model::{ByteTokenizer, ModelBundle, ProjectionDelta};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stop::compile_stops;

/// Captures every prompt in parallel; rows are placed by prompt index so the
/// result does not depend on scheduling.
pub fn capture(model: &ModelBundle<f32>, prompts: &PromptSet, model_hash: &str) -> Result<ActivationTensor> {
    let batch = tokenize_prompts(model, prompts)?;
    let rows: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|(toks, mask)| capture_prompt(model, toks, mask))
        .collect::<neurosel_core::Result<_>>()?;
    Ok(ActivationTensor::new(
        model.config.n_layers,
        model.config.d_ff,
        prompts.prompts.iter().map(|p| p.label).collect(),
        rows.concat(),
        model_hash.to_string(),
    )?)
}

/// Greedy-decodes and judges every prompt in parallel, in prompt order.
pub fn evaluate(
    model: &ModelBundle<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    prompts: &PromptSet,
    settings: &EvalSettings,
) -> Result<Vec<Transcript>> {
    let stops = compile_stops(&settings.generation)?;
    let out = prompts
        .prompts
        .par_iter()
        .map(|p| {
            let custom: Vec<&dyn StopCriterion> = stops.iter().map(|s| s as &dyn StopCriterion).collect();
            let ids = ByteTokenizer::encode_prompt(&p.text);
            let delta = adapter.map(|a| a as &dyn ProjectionDelta<f32>);
            let g = generate_text(model, delta, &ids, &settings.generation, &custom)?;
            Ok(judge(p, g.tokens, g.text, g.termination, settings.answer_format, &settings.loop_params))
        })
        .collect::<neurosel_core::Result<_>>()?;
    Ok(out)
}

/// Mean default-backend similarity of `outputs` to `reference`, pairing
/// transcripts by prompt id.
pub fn output_similarity(outputs: &[Transcript], reference: &[Transcript]) -> f64 {
    let by_id: HashMap<&str, &str> = reference.iter().map(|t| (t.prompt_id.as_str(), t.text.as_str())).collect();
    let (cand, refs): (Vec<String>, Vec<String>) = outputs
        .iter()
        .filter_map(|t| by_id.get(t.prompt_id.as_str()).map(|r| (t.text.clone(), r.to_string())))
        .unzip();
    mean_similarity(&TokenCosine, &cand, &refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub repeats: usize,
    pub seconds: f64,
    pub tokens_per_second: f64,
    /// Wall-clock figure from the machine that ran it.
    pub note: String,
}

/// Times fixed-length greedy generation (EOS ignored) and reports the best
/// of `repeats` runs.
pub fn bench_throughput(model: &ModelBundle<f32>, prompt: &str, n_tokens: usize, repeats: usize) -> Result<BenchResult> {
    let ids = ByteTokenizer::encode_prompt(prompt);
    let cfg = GenerationConfig {
        max_new_tokens: n_tokens,
        stops: Vec::new(),
    };
    let mut best = f64::INFINITY;
    let mut generated = 0;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let g = generate_text(model, None, &ids, &cfg, &[])?;
        best = best.min(t0.elapsed().as_secs_f64());
        generated = g.tokens.len();
    }
    Ok(BenchResult {
        prompt_tokens: ids.len(),
        generated_tokens: generated,
        repeats: repeats.max(1),
        seconds: best,
        tokens_per_second: generated as f64 / best.max(1e-12),
        note: "wall-clock on this machine; varies with hardware".into(),
    })
}
