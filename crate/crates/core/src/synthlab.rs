//! Planted-specialization toy models.
//!
//! The target task maps a digit to its successor (`"3="` → `"4"`), the
//! distractor task does the same for lowercase letters (`"c="` → `"d"`,
//! `z` wraps to `a`). Weights are written by hand:
//!
//! * Layer 0 attention has zero queries and keys, so every position sees the
//!   uniform average of the token identities before it. At the `=` position
//!   that average carries the prompt symbol into a context subspace.
//! * Layer 0 MLP neurons are gated on the `=` marker. A target neuron fires
//!   when the context holds its digit and writes that digit's successor
//!   logit; distractor neurons do the same for letters. Shared neurons fire
//!   on every prompt and each lowers a fallback `?` logit by `1/16`.
//! * Every symbol embedding votes for EOS, and `?` votes for itself, so a
//!   correct answer is followed by EOS while a wrong one repeats `?` until
//!   the token budget runs out.
//! * Layer 1 (when present) is generic: random gate and up rows, and a down
//!   projection that writes only into dimensions the output head ignores.
//!
//! Digit `i` gets successor strength `3.0 + 0.5·i` and letter `j`
//! `3.0 + 0.18·j`, against a `?` logit of `2 + k/16` after `k` shared neurons
//! are removed. Pruning shared neurons therefore costs the weakest digits
//! first, and removing a symbol's own neurons costs that symbol outright.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::capture::{Label, Prompt, PromptSet};
use crate::error::{Error, Result};
use crate::eval::{exact_match, AnswerFormat};
use crate::finetune::Example;
use crate::generator::{generate, Decoder, GenerationConfig, StopRule};
use crate::model::{
    forward, ActivationHook, ByteTokenizer, LayerWeights, ModelBundle, ModelConfig, ProjectionDelta, Session,
    ZeroMaskHook,
};
use crate::rng::SplitMix64;
use crate::tensor::{rmsnorm, Matrix};

pub const D_MODEL: usize = 128;
pub const VOCAB: usize = 260;
pub const MAX_SEQ_LEN: usize = 1088;
/// Byte that separates the prompt symbol from the answer.
pub const SEPARATOR: char = '=';
/// Output of a model that has lost its route for a prompt.
pub const FALLBACK: char = '?';
pub const BASE_FALLBACK_LOGIT: f64 = 2.0;
pub const SHARED_WEIGHT: f64 = 1.0 / 16.0;
/// Adapter learning rate suited to the toy model's logit scale.
pub const TOY_LEARNING_RATE: f64 = 1e-3;

const DIM_CONST: usize = 0;
const DIM_BALLAST: usize = 1;
const DIM_SEP: usize = 2;
const DIM_BOS: usize = 3;
const DIM_ID: usize = 5;
const DIM_CTX: usize = DIM_ID + 36;
const DIM_OUT: usize = DIM_CTX + 36;
const DIM_OUT_EOS: usize = DIM_OUT + 36;
const DIM_OUT_FALLBACK: usize = DIM_OUT_EOS + 1;
const DIM_JUNK: usize = DIM_OUT_FALLBACK + 1;

const BALLAST: f64 = 24.0;
const EOS_VOTE: f64 = 4.0;
const FALLBACK_SELF_VOTE: f64 = 4.0;
const CTX_GAIN: f64 = 3.0;
const ON_PRE: f64 = 4.0;
const SHARED_PRE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Digit successor, the target task.
    Digit,
    /// Letter successor, the distractor task.
    Letter,
}

impl Task {
    pub fn symbols(self) -> &'static [u8] {
        match self {
            Task::Digit => b"0123456789",
            Task::Letter => b"abcdefghijklmnopqrstuvwxyz",
        }
    }

    pub fn successor(self, c: u8) -> u8 {
        let s = self.symbols();
        let i = s.iter().position(|&x| x == c).unwrap_or(0);
        s[(i + 1) % s.len()]
    }

    pub fn label(self) -> Label {
        match self {
            Task::Digit => Label::Target,
            Task::Letter => Label::Distractor,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Digit => "digit",
            Task::Letter => "letter",
        }
    }

    /// Accuracy of uniform guessing over the task's answers.
    pub fn chance(self) -> f64 {
        1.0 / self.symbols().len() as f64
    }

    /// Successor strength of the `i`-th symbol.
    pub fn strength(self, i: usize) -> f64 {
        match self {
            Task::Digit => 3.0 + 0.5 * i as f64,
            Task::Letter => 3.0 + 0.18 * i as f64,
        }
    }

    fn symbol_slot(self, i: usize) -> usize {
        match self {
            Task::Digit => i,
            Task::Letter => 10 + i,
        }
    }
}

/// Ground-truth role of one MLP neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronRole {
    Target,
    Distractor,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub seed: u64,
    /// Multiple of 10: neurons are split evenly across digits.
    pub n_target: usize,
    /// Multiple of 26: neurons are split evenly across letters.
    pub n_distractor: usize,
    pub n_shared: usize,
    /// 1 or 2.
    pub n_layers: usize,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_target: 40,
            n_distractor: 52,
            n_shared: 164,
            n_layers: 2,
        }
    }
}

impl PlantedSpec {
    pub fn d_ff(&self) -> usize {
        self.n_target + self.n_distractor + self.n_shared
    }

    /// Share of each layer taken by target neurons.
    pub fn target_fraction(&self) -> f64 {
        self.n_target as f64 / self.d_ff() as f64
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_target == 0 || !self.n_target.is_multiple_of(10) {
            return bad(format!("n_target {} must be a positive multiple of 10", self.n_target));
        }
        if self.n_distractor == 0 || !self.n_distractor.is_multiple_of(26) {
            return bad(format!("n_distractor {} must be a positive multiple of 26", self.n_distractor));
        }
        if !(1..=2).contains(&self.n_layers) {
            return bad(format!("n_layers {} must be 1 or 2", self.n_layers));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    pub model: ModelBundle<f32>,
    /// Role of every neuron, per layer.
    pub roles: Vec<Vec<NeuronRole>>,
    pub spec: PlantedSpec,
}

impl PlantedModel {
    /// Indices with the given role, per layer.
    pub fn neurons_with(&self, role: NeuronRole) -> Vec<Vec<usize>> {
        self.roles
            .iter()
            .map(|layer| (0..layer.len()).filter(|&i| layer[i] == role).collect())
            .collect()
    }
}

pub fn planted_config(d_ff: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: D_MODEL,
        d_ff,
        n_heads: 2,
        vocab_size: VOCAB,
        norm_eps: 1e-6,
        rope_theta: 10000.0,
        max_seq_len: MAX_SEQ_LEN,
        bos_id: ByteTokenizer::BOS,
        eos_id: ByteTokenizer::EOS,
        pad_id: ByteTokenizer::PAD,
    }
}

fn tok(c: u8) -> usize {
    ByteTokenizer::byte_id(c) as usize
}

fn all_symbols() -> impl Iterator<Item = (Task, usize, u8)> {
    [Task::Digit, Task::Letter]
        .into_iter()
        .flat_map(|t| t.symbols().iter().enumerate().map(move |(i, &c)| (t, i, c)))
}

/// Builds the model and runs its self-check.
pub fn build_planted_model(spec: &PlantedSpec) -> Result<PlantedModel> {
    spec.validate()?;
    let d_ff = spec.d_ff();
    let cfg = planted_config(d_ff, spec.n_layers);
    let d = D_MODEL;
    let mut rng = SplitMix64::derive(spec.seed, 0x91a7);

    let mut embed = Matrix::<f32>::zeros(VOCAB, d);
    for r in 0..VOCAB {
        embed.set(r, DIM_CONST, 1.0);
        embed.set(r, DIM_BALLAST, BALLAST as f32);
    }
    embed.set(ByteTokenizer::BOS as usize, DIM_BOS, 1.0);
    let sep = tok(SEPARATOR as u8);
    embed.set(sep, DIM_SEP, 1.0);
    let fallback_base = BASE_FALLBACK_LOGIT + SHARED_WEIGHT * spec.n_shared as f64;
    embed.set(sep, DIM_OUT_FALLBACK, fallback_base as f32);
    embed.set(tok(FALLBACK as u8), DIM_OUT_FALLBACK, FALLBACK_SELF_VOTE as f32);
    let mut head = Matrix::<f32>::zeros(VOCAB, d);
    for (task, i, c) in all_symbols() {
        let s = task.symbol_slot(i);
        embed.set(tok(c), DIM_ID + s, 1.0);
        embed.set(tok(c), DIM_OUT_EOS, EOS_VOTE as f32);
        head.set(tok(c), DIM_OUT + s, 1.0);
    }
    head.set(ByteTokenizer::EOS as usize, DIM_OUT_EOS, 1.0);
    head.set(tok(FALLBACK as u8), DIM_OUT_FALLBACK, 1.0);

    let mut attn_v = Matrix::<f32>::zeros(d, d);
    let mut attn_o = Matrix::<f32>::zeros(d, d);
    for s in 0..36 {
        attn_v.set(DIM_CTX + s, DIM_ID + s, 1.0);
        attn_o.set(DIM_CTX + s, DIM_CTX + s, CTX_GAIN as f32);
    }

    // Residual at the `=` position entering the layer-0 MLP, identical in
    // norm for every prompt symbol.
    let ones = vec![1.0f64; d];
    let eps = cfg.norm_eps;
    let e0: Vec<f64> = embed.row(tok(b'0')).iter().map(|&v| v as f64).collect();
    let xn = rmsnorm(&e0, &ones, eps)?;
    let ctx_val = CTX_GAIN * xn[DIM_ID] / 3.0;
    let mut x_mid: Vec<f64> = embed.row(sep).iter().map(|&v| v as f64).collect();
    x_mid[DIM_CTX] += ctx_val;
    let r = {
        let ss: f64 = x_mid.iter().map(|v| v * v).sum();
        libm_sqrt(ss / d as f64 + eps)
    };

    // Neuron layout: a seeded permutation of role slots.
    let mut roles0: Vec<(NeuronRole, usize)> = Vec::with_capacity(d_ff);
    let per_digit = spec.n_target / 10;
    let per_letter = spec.n_distractor / 26;
    for i in 0..spec.n_target {
        roles0.push((NeuronRole::Target, i / per_digit));
    }
    for i in 0..spec.n_distractor {
        roles0.push((NeuronRole::Distractor, i / per_letter));
    }
    roles0.extend((0..spec.n_shared).map(|_| (NeuronRole::Shared, 0)));
    rng.shuffle(&mut roles0);

    let mut gate = Matrix::<f32>::zeros(d_ff, d);
    let mut up = Matrix::<f32>::zeros(d_ff, d);
    for (n, &(role, sym)) in roles0.iter().enumerate() {
        up.set(n, DIM_SEP, r as f32);
        match role {
            NeuronRole::Target | NeuronRole::Distractor => {
                let task = if role == NeuronRole::Target { Task::Digit } else { Task::Letter };
                let slot = task.symbol_slot(sym);
                gate.set(n, DIM_CTX + slot, (2.0 * ON_PRE * r / ctx_val) as f32);
                gate.set(n, DIM_CONST, (-ON_PRE * r) as f32);
            }
            NeuronRole::Shared => gate.set(n, DIM_CONST, (SHARED_PRE * r) as f32),
        }
    }
    let layer0 = LayerWeights {
        attn_q: Matrix::zeros(d, d),
        attn_k: Matrix::zeros(d, d),
        attn_v,
        attn_o,
        mlp_gate: gate,
        mlp_up: up,
        mlp_down: Matrix::zeros(d, d_ff),
        norm_attn: vec![1.0; d],
        norm_mlp: vec![1.0; d],
    };
    let mut layers = vec![layer0];
    if spec.n_layers == 2 {
        let readable = DIM_JUNK;
        let std = 1.0 / libm_sqrt(readable as f64);
        let mut g = Matrix::<f32>::zeros(d_ff, d);
        let mut u = Matrix::<f32>::zeros(d_ff, d);
        let mut down = Matrix::<f32>::zeros(d, d_ff);
        for n in 0..d_ff {
            for c in 0..readable {
                g.set(n, c, (rng.normal() * std) as f32);
                u.set(n, c, (rng.normal() * std) as f32);
            }
            for row in DIM_JUNK..d {
                down.set(row, n, (rng.normal() * 0.1) as f32);
            }
        }
        layers.push(LayerWeights {
            attn_q: Matrix::zeros(d, d),
            attn_k: Matrix::zeros(d, d),
            attn_v: Matrix::zeros(d, d),
            attn_o: Matrix::zeros(d, d),
            mlp_gate: g,
            mlp_up: u,
            mlp_down: down,
            norm_attn: vec![1.0; d],
            norm_mlp: vec![1.0; d],
        });
    }
    let mut model = ModelBundle {
        config: cfg,
        embed,
        layers,
        final_norm: vec![1.0; d],
        head,
    };

    // Calibrate the down projection from measured activations so each
    // symbol's neurons add up to its strength.
    let shared_h = measure_layer0(&model, b'0')?;
    for (task, i, c) in all_symbols() {
        let h = measure_layer0(&model, c)?;
        let want = if task == Task::Digit { NeuronRole::Target } else { NeuronRole::Distractor };
        let owners: Vec<usize> = (0..d_ff).filter(|&n| roles0[n] == (want, i)).collect();
        let out = DIM_OUT + task.symbol_slot((i + 1) % task.symbols().len());
        let share = task.strength(i) / owners.len() as f64;
        for &n in &owners {
            model.layers[0].mlp_down.set(out, n, (share / h[n]) as f32);
        }
    }
    for n in 0..d_ff {
        if roles0[n].0 == NeuronRole::Shared {
            model.layers[0].mlp_down.set(DIM_OUT_FALLBACK, n, (-SHARED_WEIGHT / shared_h[n]) as f32);
        }
    }
    model.validate()?;

    let mut roles = vec![roles0.iter().map(|r| r.0).collect::<Vec<_>>()];
    if spec.n_layers == 2 {
        roles.push(vec![NeuronRole::Shared; d_ff]);
    }
    let planted = PlantedModel {
        model,
        roles,
        spec: spec.clone(),
    };
    self_check(&planted)?;
    Ok(planted)
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

struct Grab(Vec<f64>);

impl ActivationHook<f32> for Grab {
    fn on_mlp_activation(&mut self, layer: usize, position: usize, h: &mut [f32]) {
        if layer == 0 && position == 2 {
            self.0 = h.iter().map(|&v| v as f64).collect();
        }
    }
}

fn measure_layer0(model: &ModelBundle<f32>, symbol: u8) -> Result<Vec<f64>> {
    let ids = ByteTokenizer::encode_prompt(&prompt_text(symbol));
    let mut grab = Grab(Vec::new());
    forward(model, &ids, &vec![1; ids.len()], Some(&mut grab))?;
    Ok(grab.0)
}

fn prompt_text(symbol: u8) -> String {
    let mut s = String::new();
    s.push(symbol as char);
    s.push(SEPARATOR);
    s
}

/// Session that zeroes a fixed neuron set on every step.
struct MaskedDecoder<'m> {
    session: Session<'m, f32>,
    hook: ZeroMaskHook,
}

impl Decoder<f32> for MaskedDecoder<'_> {
    fn feed(&mut self, token: u32) -> Result<Vec<f32>> {
        self.session.step(token, true, Some(&mut self.hook))
    }
    fn max_seq_len(&self) -> usize {
        self.session.model().config.max_seq_len
    }
    fn eos_id(&self) -> u32 {
        self.session.model().config.eos_id
    }
}

/// Fraction of the task's symbols answered correctly by greedy decoding,
/// optionally with neurons zeroed and an adapter applied.
pub fn task_accuracy(
    model: &ModelBundle<f32>,
    delta: Option<&dyn ProjectionDelta<f32>>,
    task: Task,
    zeroed: Option<&[Vec<usize>]>,
) -> Result<f64> {
    let cfg = GenerationConfig {
        max_new_tokens: 8,
        stops: vec![StopRule::Eos],
    };
    let mut correct = 0;
    for &c in task.symbols() {
        let ids = ByteTokenizer::encode_prompt(&prompt_text(c));
        let session = match delta {
            Some(dl) => Session::with_delta(model, dl),
            None => Session::new(model),
        };
        let mut dec = MaskedDecoder {
            session,
            hook: ZeroMaskHook::new(zeroed.unwrap_or(&[])),
        };
        let g = generate(&mut dec, &ids, &cfg, &[])?;
        let gold = (task.successor(c) as char).to_string();
        correct += exact_match(AnswerFormat::Leading.extract(&g.text).as_deref(), &gold) as usize;
    }
    Ok(correct as f64 / task.symbols().len() as f64)
}

fn self_check(p: &PlantedModel) -> Result<()> {
    let m = &p.model;
    for task in [Task::Digit, Task::Letter] {
        let acc = task_accuracy(m, None, task, None)?;
        if acc < 1.0 {
            return Err(Error::SelfCheck(format!("{} accuracy {acc} < 1", task.name())));
        }
    }
    let distractors = p.neurons_with(NeuronRole::Distractor);
    let acc = task_accuracy(m, None, Task::Digit, Some(&distractors))?;
    if acc < 0.99 {
        return Err(Error::SelfCheck(format!(
            "target accuracy {acc} with distractor neurons masked"
        )));
    }
    let targets = p.neurons_with(NeuronRole::Target);
    let acc = task_accuracy(m, None, Task::Digit, Some(&targets))?;
    if acc > Task::Digit.chance() {
        return Err(Error::SelfCheck(format!(
            "target accuracy {acc} above chance with target neurons masked"
        )));
    }
    Ok(())
}

/// `n` prompts cycling through the task's symbols, with gold answers.
pub fn make_task_prompts(task: Task, n: usize) -> PromptSet {
    let syms = task.symbols();
    PromptSet::new(
        (0..n)
            .map(|i| {
                let c = syms[i % syms.len()];
                Prompt {
                    id: format!("{}-{i}", task.name()),
                    text: prompt_text(c),
                    label: task.label(),
                    gold: Some((task.successor(c) as char).to_string()),
                }
            })
            .collect(),
    )
}

/// `n_per_task` prompts of each task, target prompts first.
pub fn make_mixed_prompts(n_per_task: usize) -> PromptSet {
    let mut set = make_task_prompts(Task::Digit, n_per_task);
    set.prompts.extend(make_task_prompts(Task::Letter, n_per_task).prompts);
    set
}

/// Supervised pairs for adapter training.
pub fn task_examples(task: Task, n: usize) -> Vec<Example> {
    make_task_prompts(task, n)
        .prompts
        .into_iter()
        .map(|p| Example {
            prompt: p.text,
            completion: p.gold.unwrap_or_default(),
        })
        .collect()
}

/// Activation of every layer-0 neuron at the separator for one symbol, used
/// by tests that inspect the construction.
pub fn probe_layer0(model: &ModelBundle<f32>, symbol: u8) -> Result<Vec<f64>> {
    measure_layer0(model, symbol)
}

/// Raw logits at the separator for one symbol.
pub fn separator_logits(model: &ModelBundle<f32>, symbol: u8) -> Result<Vec<f32>> {
    let ids = ByteTokenizer::encode_prompt(&prompt_text(symbol));
    let out = forward(model, &ids, &vec![1; ids.len()], None)?;
    Ok(out.row(ids.len() - 1).to_vec())
}
