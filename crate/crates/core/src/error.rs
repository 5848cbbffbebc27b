use alloc::string::String;

/// Errors raised by the pruning toolkit.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("selectivity needs both labels; found {n_target} target and {n_distractor} distractor prompts")]
    LabelCoverage { n_target: usize, n_distractor: usize },
    #[error("granularity {granularity} does not divide d_ff {d_ff}")]
    Granularity { d_ff: usize, granularity: usize },
    #[error("pruning {prune_count} of {d_ff} neurons leaves no survivors")]
    OverPrune { prune_count: usize, d_ff: usize },
    #[error("invalid pruning request: {0}")]
    InvalidPlan(String),
    #[error("context overflow: prompt {prompt} + max_new_tokens {max_new} > max_seq_len {max_seq}")]
    ContextOverflow {
        prompt: usize,
        max_new: usize,
        max_seq: usize,
    },
    #[error("unknown adapter target `{0}`")]
    UnknownTarget(String),
    #[error("loss mask selects no positions")]
    AllMasked,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("baseline accuracy is zero; relative metric undefined")]
    ZeroBaseline,
    #[error("planted model self-check failed: {0}")]
    SelfCheck(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Error {
    Error::Shape {
        op,
        left: left.into(),
        right: right.into(),
    }
}
