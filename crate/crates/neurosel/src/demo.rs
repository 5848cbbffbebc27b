//! `init-demo`: a planted model, its prompt sets and a ready-to-run config.

use std::path::{Path, PathBuf};

use neurosel_core::eval::AnswerFormat;
use neurosel_core::generator::GenerationConfig;
use neurosel_core::synthlab::{
    build_planted_model, make_mixed_prompts, make_task_prompts, task_examples, NeuronRole, PlantedSpec, Task,
    TOY_LEARNING_RATE,
};
use serde::{Deserialize, Serialize};

use crate::config::{FinetuneConfig, PruningConfig, RunConfig};
use crate::error::Result;
use crate::files::{jsonl_bytes, save_model, save_prompts, to_json_pretty, write_bytes};

/// Granularity used by the demo; the planted model is far narrower than 128.
pub const DEMO_GRANULARITY: usize = 8;
pub const DEMO_MAX_NEW_TOKENS: usize = 64;
pub const DEMO_CAPTURE_PER_LABEL: usize = 64;
pub const DEMO_TRAIN_PAIRS: usize = 200;
pub const DEMO_FINETUNE_SEED: u64 = 3;

/// Ground-truth sidecar written next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub spec: PlantedSpec,
    pub target_fraction: f64,
    pub target_task: String,
    pub distractor_task: String,
    pub target_chance: f64,
    pub distractor_chance: f64,
    /// Neuron roles, per layer.
    pub roles: Vec<Vec<NeuronRole>>,
}

/// Paths written by [`init_demo`].
#[derive(Debug, Clone)]
pub struct DemoFiles {
    pub model: PathBuf,
    pub labels: PathBuf,
    pub config: PathBuf,
    pub model_hash: String,
}

pub fn demo_config() -> RunConfig {
    RunConfig {
        model: "model.nscm".into(),
        capture_prompts: vec!["capture.jsonl".into()],
        eval_prompts: "eval_target.jsonl".into(),
        distractor_prompts: Some("eval_distractor.jsonl".into()),
        pruning: PruningConfig {
            granularity: DEMO_GRANULARITY,
            ..PruningConfig::default()
        },
        generation: GenerationConfig {
            max_new_tokens: DEMO_MAX_NEW_TOKENS,
            ..GenerationConfig::default()
        },
        loop_params: Default::default(),
        answer_format: AnswerFormat::Leading,
        eps: neurosel_core::selectivity::DEFAULT_EPS,
        finetune: Some(FinetuneConfig {
            preset: Some("math".into()),
            lora: None,
            learning_rate: Some(TOY_LEARNING_RATE),
            data: "train.jsonl".into(),
            seed: DEMO_FINETUNE_SEED,
            modes: vec![neurosel_core::pruner::PruneMode::Selective],
        }),
        out_dir: "out".into(),
        jobs: 1,
    }
}

/// Writes the demo fixture set into `dir`. Paths inside `run.json` are
/// relative to `dir`.
pub fn init_demo(dir: &Path, spec: &PlantedSpec) -> Result<DemoFiles> {
    let planted = build_planted_model(spec)?;
    let model = dir.join("model.nscm");
    let model_hash = save_model(&planted.model, &model)?;
    let labels = dir.join("labels.json");
    let sidecar = LabelsFile {
        spec: spec.clone(),
        target_fraction: spec.target_fraction(),
        target_task: Task::Digit.name().into(),
        distractor_task: Task::Letter.name().into(),
        target_chance: Task::Digit.chance(),
        distractor_chance: Task::Letter.chance(),
        roles: planted.roles.clone(),
    };
    write_bytes(&labels, &to_json_pretty(&sidecar))?;
    save_prompts(&make_mixed_prompts(DEMO_CAPTURE_PER_LABEL), &dir.join("capture.jsonl"))?;
    save_prompts(&make_task_prompts(Task::Digit, 10), &dir.join("eval_target.jsonl"))?;
    save_prompts(&make_task_prompts(Task::Letter, 26), &dir.join("eval_distractor.jsonl"))?;
    write_bytes(
        &dir.join("train.jsonl"),
        &jsonl_bytes(&task_examples(Task::Digit, DEMO_TRAIN_PAIRS)),
    )?;
    let config = dir.join("run.json");
    write_bytes(&config, &to_json_pretty(&demo_config()))?;
    Ok(DemoFiles {
        model,
        labels,
        config,
        model_hash,
    })
}
