//! SwiGLU decoder-only transformer: weights, byte tokenizer and the
//! hooked forward pass.

mod bundle;
mod config;
mod forward;
mod tokenizer;

pub use bundle::{LayerWeights, ModelBundle, Proj, TensorRef};
pub use config::ModelConfig;
pub use forward::{
    forward, forward_with_delta, ActivationHook, ProjectionDelta, Session, ZeroMaskHook,
};
pub(crate) use forward::{attend, RopeTable};
pub use tokenizer::{ByteTokenizer, BYTE_OFFSET};
