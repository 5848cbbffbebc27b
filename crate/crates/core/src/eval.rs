//! Accuracy, trap bookkeeping, comparison metrics and resource accounting.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::capture::{Prompt, PromptSet};
use crate::error::{Error, Result};
use crate::generator::{
    boxed_spans, detect_trap, generate_text, GenerationConfig, LoopParams, StopCriterion, Termination,
    TrapKind, TrapVerdict,
};
use crate::model::{ByteTokenizer, ModelBundle, ProjectionDelta};
use crate::pruner::{PruneMode, PruningPlan};
use crate::tensor::Real;

/// Contents of the last complete `\boxed{…}` in `text`.
pub fn extract_boxed_answer(text: &str) -> Option<String> {
    boxed_spans(text).last().map(|(a, b)| text[a..b].to_string())
}

/// How the answer is read out of generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerFormat {
    /// Last complete `\boxed{…}`.
    #[default]
    Boxed,
    /// First whitespace-delimited word.
    Leading,
}

impl AnswerFormat {
    pub fn extract(self, text: &str) -> Option<String> {
        match self {
            AnswerFormat::Boxed => extract_boxed_answer(text),
            AnswerFormat::Leading => text.split_whitespace().next().map(str::to_string),
        }
    }
}

/// Exact match of an extracted answer against the reference, both trimmed.
pub fn exact_match(extracted: Option<&str>, gold: &str) -> bool {
    extracted.is_some_and(|a| a.trim() == gold.trim())
}

/// `(original − pruned) / original · 100`.
pub fn relative_accuracy_loss(a_original: f64, a_pruned: f64) -> Result<f64> {
    if a_original == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((a_original - a_pruned) / a_original * 100.0)
}

/// `(after − before) / before · 100`.
pub fn relative_gain(a_before: f64, a_after: f64) -> Result<f64> {
    if a_before == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((a_after - a_before) / a_before * 100.0)
}

pub fn delta_selective_random(a_selective: f64, a_random: f64) -> f64 {
    a_selective - a_random
}

/// Mean of two similarity scores in `[-1, 1]`.
pub fn distractor_similarity(first: f64, second: f64) -> Result<f64> {
    for v in [first, second] {
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::DegenerateInput(alloc::format!(
                "similarity {v} outside [-1, 1]"
            )));
        }
    }
    Ok((first + second) / 2.0)
}

/// Similarity between a candidate output and a reference output.
pub trait SimilarityScorer {
    fn score(&self, candidate: &str, reference: &str) -> f64;
}

/// Cosine similarity of byte-token frequency vectors. Two empty texts are
/// identical (1.0); one empty text shares nothing with the other (0.0).
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenCosine;

impl SimilarityScorer for TokenCosine {
    fn score(&self, candidate: &str, reference: &str) -> f64 {
        token_cosine(candidate, reference)
    }
}

pub fn token_cosine(a: &str, b: &str) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let freq = |s: &str| {
        let mut m = BTreeMap::new();
        for t in ByteTokenizer::encode(s) {
            *m.entry(t).or_insert(0u64) += 1;
        }
        m
    };
    let (fa, fb) = (freq(a), freq(b));
    let dot: u64 = fa.iter().filter_map(|(k, &x)| fb.get(k).map(|&y| x * y)).sum();
    let sq = |m: &BTreeMap<u32, u64>| m.values().map(|&x| x * x).sum::<u64>();
    let denom = Float::sqrt(sq(&fa) as f64 * sq(&fb) as f64);
    if denom == 0.0 {
        0.0
    } else {
        (dot as f64 / denom).min(1.0)
    }
}

/// Mean pairwise similarity between two aligned output lists.
pub fn mean_similarity(scorer: &dyn SimilarityScorer, candidates: &[String], references: &[String]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| scorer.score(c, r)).sum();
    sum / candidates.len() as f64
}

/// Analytic cost: two FLOPs per multiply-accumulate over every parameter
/// that takes part in a matrix product for one token.
pub fn flops_per_token<T: Real>(model: &ModelBundle<T>) -> u64 {
    2 * model.matmul_param_count()
}

/// One evaluated prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
    pub text: String,
    pub termination: Termination,
    pub answer: Option<String>,
    pub correct: bool,
    pub trap: TrapVerdict,
}

/// Counts over a transcript set. A correct answer that is followed by a
/// trap counts as correct and as a Type-1 trap.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub n_correct: usize,
    pub n_type1: usize,
    pub n_type2: usize,
}

impl Tally {
    pub fn from_transcripts(ts: &[Transcript]) -> Self {
        let mut t = Tally::default();
        for x in ts {
            t.add(x.correct, x.trap.kind);
        }
        t
    }

    pub fn add(&mut self, correct: bool, trap: TrapKind) {
        self.n += 1;
        self.n_correct += correct as usize;
        match trap {
            TrapKind::None => {}
            TrapKind::Type1 => self.n_type1 += 1,
            TrapKind::Type2 => self.n_type2 += 1,
        }
    }

    fn frac(&self, k: usize) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            k as f64 / self.n as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.frac(self.n_correct)
    }

    pub fn trap_rate(&self) -> f64 {
        self.frac(self.n_type1 + self.n_type2)
    }

    pub fn type1_rate(&self) -> f64 {
        self.frac(self.n_type1)
    }

    pub fn type2_rate(&self) -> f64 {
        self.frac(self.n_type2)
    }
}

/// Scores one generated text against its prompt.
pub fn judge(
    prompt: &Prompt,
    tokens: Vec<u32>,
    text: String,
    termination: Termination,
    format: AnswerFormat,
    loop_params: &LoopParams,
) -> Transcript {
    let answer = format.extract(&text);
    let correct = prompt.gold.as_deref().is_some_and(|g| exact_match(answer.as_deref(), g));
    let trap = detect_trap(&tokens, termination, correct, loop_params);
    Transcript {
        prompt_id: prompt.id.clone(),
        tokens,
        text,
        termination,
        answer,
        correct,
        trap,
    }
}

/// Everything needed to evaluate a prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub generation: GenerationConfig,
    pub loop_params: LoopParams,
    pub answer_format: AnswerFormat,
}

/// Greedy-decodes every prompt (`[bos] + text`) and judges the output.
pub fn evaluate<T: Real>(
    model: &ModelBundle<T>,
    delta: Option<&dyn ProjectionDelta<T>>,
    prompts: &PromptSet,
    settings: &EvalSettings,
    custom: &[&dyn StopCriterion],
) -> Result<Vec<Transcript>> {
    prompts
        .prompts
        .iter()
        .map(|p| {
            let ids = ByteTokenizer::encode_prompt(&p.text);
            let g = generate_text(model, delta, &ids, &settings.generation, custom)?;
            Ok(judge(p, g.tokens, g.text, g.termination, settings.answer_format, &settings.loop_params))
        })
        .collect()
}

/// Pruning metadata carried in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub mode: PruneMode,
    pub nominal_ratio: f64,
    pub exact_ratio: f64,
    pub prune_count: usize,
    pub d_ff: usize,
    pub granularity: usize,
    pub seed: Option<u64>,
}

impl From<&PruningPlan> for PlanSummary {
    fn from(p: &PruningPlan) -> Self {
        Self {
            mode: p.mode,
            nominal_ratio: p.nominal_ratio,
            exact_ratio: p.exact_ratio(),
            prune_count: p.prune_count,
            d_ff: p.d_ff,
            granularity: p.granularity,
            seed: p.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub trap_rate_total: f64,
    pub trap_rate_type1: f64,
    pub trap_rate_type2: f64,
    pub relative_accuracy_loss: Option<f64>,
    pub relative_gain: Option<f64>,
    pub delta_selective_random: Option<f64>,
    pub distractor_similarity: Option<f64>,
    pub param_count: u64,
    pub flops_per_token: u64,
    pub tokens_per_second: Option<f64>,
    pub plan: Option<PlanSummary>,
    pub loop_params: LoopParams,
}

impl EvalReport {
    /// Report with accuracy, trap rates and resource counts filled in; the
    /// comparison metrics are left for the caller.
    pub fn new<T: Real>(model: &ModelBundle<T>, tally: &Tally, loop_params: LoopParams) -> Self {
        Self {
            n_items: tally.n,
            n_correct: tally.n_correct,
            accuracy: tally.accuracy(),
            trap_rate_total: tally.trap_rate(),
            trap_rate_type1: tally.type1_rate(),
            trap_rate_type2: tally.type2_rate(),
            relative_accuracy_loss: None,
            relative_gain: None,
            delta_selective_random: None,
            distractor_similarity: None,
            param_count: model.param_count(),
            flops_per_token: flops_per_token(model),
            tokens_per_second: None,
            plan: None,
            loop_params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::Label;
    use alloc::vec;

    #[test]
    fn extraction() {
        assert_eq!(extract_boxed_answer("so \\boxed{42}").as_deref(), Some("42"));
        assert_eq!(extract_boxed_answer("\\boxed{1} then \\boxed{2}").as_deref(), Some("2"));
        assert_eq!(extract_boxed_answer("no box here"), None);
        assert_eq!(extract_boxed_answer("\\boxed{\\frac{1}{2}}").as_deref(), Some("\\frac{1}{2}"));
        assert_eq!(AnswerFormat::Leading.extract("  7\n"), Some("7".into()));
        assert_eq!(AnswerFormat::Leading.extract("   "), None);
    }

    #[test]
    fn matching() {
        assert!(exact_match(Some("42"), "42"));
        assert!(exact_match(Some(" 42 "), "42"));
        assert!(!exact_match(None, "42"));
        assert!(!exact_match(Some("4 2"), "42"));
    }

    #[test]
    fn published_arithmetic() {
        let r2 = |x: f64| (x * 100.0).round() / 100.0;
        assert_eq!(r2(relative_accuracy_loss(94.47, 57.85).unwrap()), 38.76);
        assert_eq!(r2(relative_accuracy_loss(84.0, 22.37).unwrap()), 73.37);
        assert_eq!(r2(relative_gain(22.37, 51.25).unwrap()), 129.10);
        assert_eq!(r2(relative_gain(57.85, 73.84).unwrap()), 27.64);
        assert_eq!(relative_accuracy_loss(50.0, 50.0).unwrap(), 0.0);
        assert_eq!(relative_gain(0.0, 5.0), Err(Error::ZeroBaseline));
        assert_eq!(delta_selective_random(0.4, 0.6), 0.4 - 0.6);
    }

    #[test]
    fn loss_identity() {
        for i in 1..=50 {
            let a = i as f64 * 1.7;
            for j in 0..=20 {
                let x = j as f64 / 20.0;
                let got = relative_accuracy_loss(a, a * (1.0 - x)).unwrap();
                assert!((got - 100.0 * x).abs() <= 1e-9, "{a} {x} {got}");
            }
        }
    }

    #[test]
    fn similarity() {
        assert_eq!(distractor_similarity(0.8, 0.6).unwrap(), 0.7);
        assert!(distractor_similarity(1.5, 0.0).is_err());
        assert_eq!(token_cosine("hello world", "hello world"), 1.0);
        assert_eq!(token_cosine("abc", "xyz"), 0.0);
        assert_eq!(token_cosine("", ""), 1.0);
        assert_eq!(token_cosine("a", ""), 0.0);
        let s = token_cosine("aab", "ab");
        assert!((s - 3.0 / (5.0f64.sqrt() * 2.0f64.sqrt())).abs() < 1e-12);
    }

    fn prompt(gold: &str) -> Prompt {
        Prompt {
            id: "p".into(),
            text: "q".into(),
            label: Label::Target,
            gold: Some(gold.into()),
        }
    }

    #[test]
    fn correct_then_trap_counts_both() {
        let lp = LoopParams::default();
        let mut text = String::from("\\boxed{5}");
        text.push_str(&"!".repeat(900));
        let toks = ByteTokenizer::encode(&text);
        let t1 = judge(&prompt("5"), toks, text, Termination::MaxTokens, AnswerFormat::Boxed, &lp);
        assert!(t1.correct);
        assert_eq!(t1.trap.kind, TrapKind::Type1);

        let text = "?".repeat(64);
        let t2 = judge(
            &prompt("5"),
            ByteTokenizer::encode(&text),
            text,
            Termination::MaxTokens,
            AnswerFormat::Boxed,
            &lp,
        );
        assert_eq!(t2.trap.kind, TrapKind::Type2);
        let ok = judge(
            &prompt("5"),
            ByteTokenizer::encode("\\boxed{5}"),
            "\\boxed{5}".into(),
            Termination::Eos,
            AnswerFormat::Boxed,
            &lp,
        );
        let tally = Tally::from_transcripts(&[t1, t2, ok]);
        assert_eq!(tally.n_correct, 2);
        assert_eq!((tally.n_type1, tally.n_type2), (1, 1));
        assert!((tally.trap_rate() - (tally.type1_rate() + tally.type2_rate())).abs() < 1e-15);
        assert!((tally.accuracy() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn flops_follow_matmul_params() {
        let cfg = crate::model::ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 32,
            n_heads: 2,
            vocab_size: 260,
            norm_eps: 1e-6,
            rope_theta: 1e4,
            max_seq_len: 16,
            bos_id: 1,
            eos_id: 2,
            pad_id: 0,
        };
        let m = ModelBundle::<f32>::random(cfg, 1, 1.0).unwrap();
        assert_eq!(flops_per_token(&m), 2 * (2 * (4 * 64 + 3 * 8 * 32) + 260 * 8));
        let plan = PruningPlan::from_pruned_sets(32, vec![vec![0, 5, 9], vec![1, 2, 3]], PruneMode::Random, 1)
            .unwrap();
        let p = crate::pruner::apply_prune(&m, &plan).unwrap();
        assert_eq!(flops_per_token(&m) - flops_per_token(&p), 2 * 3 * 8 * 3 * 2);
    }
}
