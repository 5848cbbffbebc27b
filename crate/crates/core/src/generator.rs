//! Greedy decoding, stopping rules and trap detection.
//!
//! Decoding always takes the arg-max logit, lowest token id on ties. A
//! finished generation is classified as trapped when it ran out of budget
//! or its tail is periodic; traps that follow a correct answer are Type 1,
//! the rest Type 2.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ByteTokenizer, ModelBundle, ProjectionDelta, Session};
use crate::tensor::Real;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 1024;

/// One entry of the ordered stop list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "pattern")]
pub enum StopRule {
    /// Stop when the model emits its end-of-sequence token.
    Eos,
    /// Stop once the text holds a complete `\boxed{…}`.
    BoxedAnswer,
    /// Stop when a caller-supplied criterion fires. The pattern is resolved
    /// outside this crate (the CLI compiles it as a regular expression).
    Custom(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub stops: Vec<StopRule>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            stops: alloc::vec![StopRule::Eos],
        }
    }
}

impl GenerationConfig {
    pub fn with_boxed_stop(mut self) -> Self {
        if !self.stops.contains(&StopRule::BoxedAnswer) {
            self.stops.push(StopRule::BoxedAnswer);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Text predicate checked after every generated token.
pub trait StopCriterion {
    fn is_satisfied(&self, text: &str) -> bool;
}

impl<F: Fn(&str) -> bool> StopCriterion for F {
    fn is_satisfied(&self, text: &str) -> bool {
        self(text)
    }
}

/// Source of next-token logits.
pub trait Decoder<T> {
    /// Appends `token` to the context and returns the logits that follow it.
    fn feed(&mut self, token: u32) -> Result<Vec<T>>;
    fn max_seq_len(&self) -> usize;
    fn eos_id(&self) -> u32;
}

impl<T: Real> Decoder<T> for Session<'_, T> {
    fn feed(&mut self, token: u32) -> Result<Vec<T>> {
        self.step(token, true, None)
    }

    fn max_seq_len(&self) -> usize {
        self.model().config.max_seq_len
    }

    fn eos_id(&self) -> u32 {
        self.model().config.eos_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    StopCriterion,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated tokens, without the prompt and without a final EOS.
    pub tokens: Vec<u32>,
    pub text: String,
    pub termination: Termination,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// True iff `text` contains `\boxed{` followed by a balanced closing brace.
pub fn boxed_stop(text: &str) -> bool {
    boxed_spans(text).next().is_some()
}

/// Byte ranges of the contents of every complete `\boxed{…}`, in order.
pub fn boxed_spans(text: &str) -> impl Iterator<Item = (usize, usize)> + '_ {
    const OPEN: &str = "\\boxed{";
    let bytes = text.as_bytes();
    let mut from = 0;
    core::iter::from_fn(move || {
        while let Some(rel) = text.get(from..)?.find(OPEN) {
            let start = from + rel + OPEN.len();
            let mut depth = 1usize;
            let mut i = start;
            while i < bytes.len() {
                match bytes[i] {
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            from = i + 1;
                            return Some((start, i));
                        }
                    }
                    _ => {}
                }
                i += 1;
            }
            // Unterminated: a later `\boxed{` may still close.
            from = from + rel + 1;
        }
        None
    })
}

/// Greedy decoding from `prompt` until a stop rule fires or the budget runs
/// out. `custom` supplies the criteria for [`StopRule::Custom`] entries, in
/// the order they appear in the config.
pub fn generate<T: Real>(
    decoder: &mut dyn Decoder<T>,
    prompt: &[u32],
    config: &GenerationConfig,
    custom: &[&dyn StopCriterion],
) -> Result<Generation> {
    config.validate()?;
    let max_seq = decoder.max_seq_len();
    if prompt.is_empty() || prompt.len() + config.max_new_tokens > max_seq {
        return Err(Error::ContextOverflow {
            prompt: prompt.len(),
            max_new: config.max_new_tokens,
            max_seq,
        });
    }
    let stop_on_eos = config.stops.contains(&StopRule::Eos);
    let eos = decoder.eos_id();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = decoder.feed(t)?;
    }
    let mut tokens = Vec::new();
    let mut bytes = Vec::new();
    let check_text = config.stops.iter().any(|s| !matches!(s, StopRule::Eos));
    for step in 0..config.max_new_tokens {
        let next = argmax(&logits) as u32;
        if stop_on_eos && next == eos {
            return Ok(finish(tokens, bytes, Termination::Eos));
        }
        tokens.push(next);
        if let Some(b) = ByteTokenizer::id_byte(next) {
            bytes.push(b);
        }
        if check_text && text_stop(&bytes, config, custom) {
            return Ok(finish(tokens, bytes, Termination::StopCriterion));
        }
        if step + 1 < config.max_new_tokens {
            logits = decoder.feed(next)?;
        }
    }
    Ok(finish(tokens, bytes, Termination::MaxTokens))
}

fn text_stop(bytes: &[u8], config: &GenerationConfig, custom: &[&dyn StopCriterion]) -> bool {
    let text = String::from_utf8_lossy(bytes);
    let mut next_custom = custom.iter();
    config.stops.iter().any(|rule| match rule {
        StopRule::Eos => false,
        StopRule::BoxedAnswer => boxed_stop(&text),
        StopRule::Custom(_) => next_custom.next().is_some_and(|c| c.is_satisfied(&text)),
    })
}

fn finish(tokens: Vec<u32>, bytes: Vec<u8>, termination: Termination) -> Generation {
    Generation {
        tokens,
        text: String::from_utf8_lossy(&bytes).into_owned(),
        termination,
    }
}

/// [`generate`] over a fresh session of `model`, optionally with an additive
/// projection delta.
pub fn generate_text<T: Real>(
    model: &ModelBundle<T>,
    delta: Option<&dyn ProjectionDelta<T>>,
    prompt: &[u32],
    config: &GenerationConfig,
    custom: &[&dyn StopCriterion],
) -> Result<Generation> {
    let mut session = match delta {
        Some(d) => Session::with_delta(model, d),
        None => Session::new(model),
    };
    generate(&mut session, prompt, config, custom)
}

/// Boxed [`boxed_stop`], for callers assembling a criteria list.
pub fn boxed_criterion() -> Box<dyn StopCriterion> {
    Box::new(boxed_stop)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopParams {
    pub min_period: usize,
    pub max_period: usize,
    pub min_repeats: usize,
    pub window: usize,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            min_period: 1,
            max_period: 64,
            min_repeats: 4,
            window: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopInfo {
    pub period: usize,
    pub repeat_count: usize,
    /// Index of the first token of the repeating tail.
    pub start_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrapKind {
    None,
    Type1,
    Type2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapEvidence {
    pub eos_emitted: bool,
    /// Generation ended on a text stop rule before the budget.
    pub stopped_by_criterion: bool,
    pub answer_found: bool,
    pub loop_info: Option<LoopInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapVerdict {
    pub kind: TrapKind,
    pub evidence: TrapEvidence,
}

impl TrapVerdict {
    pub fn is_trap(&self) -> bool {
        self.kind != TrapKind::None
    }
}

/// Shortest period in `[min_period, max_period]` whose repetition covers at
/// least `min_repeats` copies at the end of the trailing window.
pub fn find_loop(tokens: &[u32], params: &LoopParams) -> Option<LoopInfo> {
    let n = tokens.len();
    let w = params.window.min(n);
    let tail = &tokens[n - w..];
    let lo = params.min_period.max(1);
    let hi = params.max_period.min(w);
    for q in lo..=hi {
        let mut run = 0;
        while run + q < w && tail[w - 1 - run] == tail[w - 1 - run - q] {
            run += 1;
        }
        let repeats = (run + q) / q;
        if repeats >= params.min_repeats.max(1) {
            return Some(LoopInfo {
                period: q,
                repeat_count: repeats,
                start_index: n - repeats * q,
            });
        }
    }
    None
}

/// Classifies a finished generation.
pub fn detect_trap(
    tokens: &[u32],
    termination: Termination,
    answer_found: bool,
    params: &LoopParams,
) -> TrapVerdict {
    let loop_info = find_loop(tokens, params);
    let trapped = termination == Termination::MaxTokens || loop_info.is_some();
    let kind = match (trapped, answer_found) {
        (false, _) => TrapKind::None,
        (true, true) => TrapKind::Type1,
        (true, false) => TrapKind::Type2,
    };
    TrapVerdict {
        kind,
        evidence: TrapEvidence {
            eos_emitted: termination == Termination::Eos,
            stopped_by_criterion: termination == Termination::StopCriterion,
            answer_found,
            loop_info,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    /// Replays a fixed script of tokens as one-hot logits.
    struct Scripted {
        script: Vec<u32>,
        fed: usize,
        prompt_len: usize,
        vocab: usize,
    }

    impl Scripted {
        fn new(prompt_len: usize, script: &[u32]) -> Self {
            Self {
                script: script.to_vec(),
                fed: 0,
                prompt_len,
                vocab: 300,
            }
        }
    }

    impl Decoder<f32> for Scripted {
        fn feed(&mut self, _token: u32) -> Result<Vec<f32>> {
            self.fed += 1;
            let i = self.fed.saturating_sub(self.prompt_len);
            let tok = *self.script.get(i).or(self.script.last()).unwrap();
            let mut l = vec![0.0; self.vocab];
            l[tok as usize] = 1.0;
            Ok(l)
        }
        fn max_seq_len(&self) -> usize {
            4096
        }
        fn eos_id(&self) -> u32 {
            2
        }
    }

    fn ids(s: &str) -> Vec<u32> {
        ByteTokenizer::encode(s)
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn boxed_examples() {
        assert!(boxed_stop("so \\boxed{42}"));
        assert!(!boxed_stop("so \\boxed{4"));
        assert!(boxed_stop("\\boxed{\\frac{1}{2}}"));
        assert!(!boxed_stop("\\boxed{\\frac{1}{2}"));
        assert!(boxed_stop("\\boxed{1 \\boxed{2}"));
        assert!(!boxed_stop("boxed{1}"));
    }

    #[test]
    fn eos_first_is_empty() {
        let mut d = Scripted::new(1, &[2]);
        let g = generate(&mut d, &[1], &GenerationConfig::default(), &[]).unwrap();
        assert!(g.tokens.is_empty());
        assert_eq!(g.termination, Termination::Eos);
    }

    #[test]
    fn stops_and_budget() {
        let mut script = ids("\\boxed{5}");
        script.extend(ids("5555"));
        let cfg = GenerationConfig {
            max_new_tokens: 40,
            stops: vec![StopRule::Eos],
        };
        let g = generate(&mut Scripted::new(2, &script), &[1, 7], &cfg, &[]).unwrap();
        assert_eq!(g.termination, Termination::MaxTokens);
        assert_eq!(g.tokens.len(), 40);
        let g = generate(&mut Scripted::new(2, &script), &[1, 7], &cfg.clone().with_boxed_stop(), &[]).unwrap();
        assert_eq!(g.termination, Termination::StopCriterion);
        assert_eq!(g.text, "\\boxed{5}");

        let cfg = GenerationConfig {
            max_new_tokens: 40,
            stops: vec![StopRule::Eos, StopRule::Custom("5{3}".into())],
        };
        let three = |t: &str| t.contains("555");
        let g = generate(&mut Scripted::new(2, &script), &[1, 7], &cfg, &[&three]).unwrap();
        assert_eq!(g.termination, Termination::StopCriterion);
        assert!(g.text.ends_with("555"));
    }

    #[test]
    fn context_overflow() {
        let cfg = GenerationConfig {
            max_new_tokens: 4095,
            stops: vec![StopRule::Eos],
        };
        assert!(matches!(
            generate(&mut Scripted::new(2, &[5]), &[1, 7], &cfg, &[]),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn loop_detection() {
        let mut toks = vec![1, 2, 3, 4, 5];
        toks.extend([7, 8, 9].repeat(4));
        let v = detect_trap(&toks, Termination::MaxTokens, false, &LoopParams::default());
        assert_eq!(v.kind, TrapKind::Type2);
        assert_eq!(
            v.evidence.loop_info,
            Some(LoopInfo {
                period: 3,
                repeat_count: 4,
                start_index: 5
            })
        );
        let v = detect_trap(&toks, Termination::MaxTokens, true, &LoopParams::default());
        assert_eq!(v.kind, TrapKind::Type1);
        toks.pop();
        assert_eq!(find_loop(&toks, &LoopParams::default()).map(|l| l.period), None);
        let v = detect_trap(&[4, 5, 6], Termination::Eos, true, &LoopParams::default());
        assert_eq!(v.kind, TrapKind::None);
        assert!(v.evidence.eos_emitted);
    }

    #[test]
    fn type1_after_answer() {
        let mut toks = ids("The answer is \\boxed{5}");
        toks.extend(core::iter::repeat_n(ids(" ")[0], 900));
        let v = detect_trap(&toks, Termination::MaxTokens, true, &LoopParams::default());
        assert_eq!(v.kind, TrapKind::Type1);
        assert_eq!(v.evidence.loop_info.unwrap().period, 1);
        assert_eq!(v.evidence.loop_info.unwrap().repeat_count, 256);
    }

    fn check_invariants(v: &TrapVerdict) -> bool {
        let e = &v.evidence;
        let none_iff = (v.kind == TrapKind::None)
            == ((e.eos_emitted || e.stopped_by_criterion) && e.loop_info.is_none());
        let t1 = v.kind != TrapKind::Type1 || e.answer_found;
        let t2 = v.kind != TrapKind::Type2 || !e.answer_found;
        none_iff && t1 && t2
    }

    proptest! {
        #[test]
        fn verdict_invariants(
            toks in proptest::collection::vec(0u32..4, 0..80),
            term in 0usize..3,
            found: bool,
        ) {
            let term = [Termination::Eos, Termination::StopCriterion, Termination::MaxTokens][term];
            let v = detect_trap(&toks, term, found, &LoopParams::default());
            prop_assert!(check_invariants(&v));
        }

        #[test]
        fn looser_repeats_never_lose_a_loop(
            toks in proptest::collection::vec(0u32..3, 0..60),
            r in 2usize..6,
        ) {
            let strict = LoopParams { min_repeats: r, ..LoopParams::default() };
            let loose = LoopParams { min_repeats: r - 1, ..LoopParams::default() };
            if find_loop(&toks, &strict).is_some() {
                prop_assert!(find_loop(&toks, &loose).is_some());
            }
        }

        #[test]
        fn boxed_stop_prevents_type1(prefix in "[a-z ]{0,20}", ans in "[0-9]{1,4}") {
            let mut script = ids(&prefix);
            script.extend(ids(&alloc::format!("\\boxed{{{ans}}}")));
            script.extend(ids("xyxyxyxyxyxy"));
            let cfg = GenerationConfig { max_new_tokens: 200, stops: vec![StopRule::Eos] }.with_boxed_stop();
            let g = generate(&mut Scripted::new(1, &script), &[1], &cfg, &[]).unwrap();
            let v = detect_trap(&g.tokens, g.termination, true, &LoopParams::default());
            prop_assert!(v.kind != TrapKind::Type1 || find_loop(&g.tokens, &LoopParams::default()).is_some());
            prop_assert_eq!(g.termination, Termination::StopCriterion);
        }
    }
}
