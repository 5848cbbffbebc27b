//! Forward pass.
//!
//! A [`Session`] advances one token at a time over a key/value cache. The
//! whole-sequence [`forward`] is a session stepped over every position, so
//! cached decoding and full forwards produce identical numbers.
//!
//! Per layer: `x += Wo · attn(rope(Wq·n₁(x)), rope(Wk·n₁(x)), Wv·n₁(x))`,
//! then `h = silu(Wgate·n₂(x)) ⊙ (Wup·n₂(x))`, the hook sees `h`, and
//! `x += Wdown · h`. Attention is causal; keys whose mask bit is 0 are never
//! attended to.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{dot, matvec_into, rmsnorm_into, silu, softmax_in_place, Matrix, Real};

use super::bundle::{ModelBundle, Proj};

/// Receives the SwiGLU intermediate `h` of every layer and position before
/// the down-projection is applied. The slice may be modified in place.
pub trait ActivationHook<T> {
    fn on_mlp_activation(&mut self, layer: usize, position: usize, h: &mut [T]);
}

/// Additive correction to a projection: `out += Δ(input)`. Used for
/// unmerged low-rank adapters.
pub trait ProjectionDelta<T> {
    fn add_delta(&self, layer: usize, proj: Proj, input: &[T], out: &mut [T]);
}

/// Forces the listed neurons' `h` to zero in every layer where they appear.
#[derive(Debug, Clone, Default)]
pub struct ZeroMaskHook {
    per_layer: Vec<BTreeSet<usize>>,
}

impl ZeroMaskHook {
    pub fn new(per_layer: &[Vec<usize>]) -> Self {
        Self {
            per_layer: per_layer.iter().map(|v| v.iter().copied().collect()).collect(),
        }
    }
}

impl<T: Real> ActivationHook<T> for ZeroMaskHook {
    fn on_mlp_activation(&mut self, layer: usize, _position: usize, h: &mut [T]) {
        if let Some(set) = self.per_layer.get(layer) {
            for &n in set {
                h[n] = T::zero();
            }
        }
    }
}

/// Decoding state over one sequence.
pub struct Session<'m, T: Real> {
    model: &'m ModelBundle<T>,
    delta: Option<&'m dyn ProjectionDelta<T>>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    key_mask: Vec<bool>,
    rope: RopeTable,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn new(model: &'m ModelBundle<T>) -> Self {
        Self::build(model, None)
    }

    pub fn with_delta(model: &'m ModelBundle<T>, delta: &'m dyn ProjectionDelta<T>) -> Self {
        Self::build(model, Some(delta))
    }

    fn build(model: &'m ModelBundle<T>, delta: Option<&'m dyn ProjectionDelta<T>>) -> Self {
        let l = model.config.n_layers;
        Self {
            model,
            delta,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            key_mask: Vec::new(),
            rope: RopeTable::new(model.config.head_dim(), model.config.rope_theta),
        }
    }

    pub fn model(&self) -> &'m ModelBundle<T> {
        self.model
    }

    /// Number of positions consumed so far.
    pub fn len(&self) -> usize {
        self.key_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_mask.is_empty()
    }

    /// Consumes one token and returns the logits at its position.
    pub fn step<'h>(
        &mut self,
        token: u32,
        mask: bool,
        mut hook: Option<&mut (dyn ActivationHook<T> + 'h)>,
    ) -> Result<Vec<T>> {
        let model = self.model;
        let c = &model.config;
        if token as usize >= c.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab: c.vocab_size,
            });
        }
        let pos = self.key_mask.len();
        if pos >= c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: c.max_seq_len,
            });
        }
        self.key_mask.push(mask);

        let d = c.d_model;
        let eps = T::from_f64(c.norm_eps);
        let mut x = model.embed.row(token as usize).to_vec();
        let mut xn = vec![T::zero(); d];
        let mut q = vec![T::zero(); d];
        let mut k = vec![T::zero(); d];
        let mut v = vec![T::zero(); d];
        let mut ctx = vec![T::zero(); d];
        let mut proj_out = vec![T::zero(); d];
        let mut g = vec![T::zero(); c.d_ff];
        let mut u = vec![T::zero(); c.d_ff];

        for (li, layer) in model.layers.iter().enumerate() {
            rmsnorm_into(&x, &layer.norm_attn, eps, &mut xn);
            self.project(li, Proj::Q, &layer.attn_q, &xn, &mut q);
            self.project(li, Proj::K, &layer.attn_k, &xn, &mut k);
            self.project(li, Proj::V, &layer.attn_v, &xn, &mut v);
            self.rope.apply(&mut q, pos, c.n_heads);
            self.rope.apply(&mut k, pos, c.n_heads);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);

            attend(&q, &self.keys[li], &self.values[li], &self.key_mask, c.n_heads, &mut ctx, None);
            self.project(li, Proj::O, &layer.attn_o, &ctx, &mut proj_out);
            for (xi, &a) in x.iter_mut().zip(&proj_out) {
                *xi += a;
            }

            // The MLP width is read from the weights so pruned bundles work
            // without touching scratch sizing.
            let f = layer.mlp_gate.rows();
            g.resize(f, T::zero());
            u.resize(f, T::zero());
            rmsnorm_into(&x, &layer.norm_mlp, eps, &mut xn);
            self.project(li, Proj::Gate, &layer.mlp_gate, &xn, &mut g);
            self.project(li, Proj::Up, &layer.mlp_up, &xn, &mut u);
            for (gi, &ui) in g.iter_mut().zip(&u) {
                *gi = silu(*gi) * ui;
            }
            if let Some(h) = hook.as_deref_mut() {
                h.on_mlp_activation(li, pos, &mut g);
            }
            self.project(li, Proj::Down, &layer.mlp_down, &g, &mut proj_out);
            for (xi, &m) in x.iter_mut().zip(&proj_out) {
                *xi += m;
            }
        }

        rmsnorm_into(&x, &model.final_norm, eps, &mut xn);
        let mut logits = vec![T::zero(); c.vocab_size];
        matvec_into(&model.head, &xn, &mut logits);
        Ok(logits)
    }

    #[inline]
    fn project(&self, layer: usize, p: Proj, w: &Matrix<T>, input: &[T], out: &mut [T]) {
        matvec_into(w, input, out);
        if let Some(delta) = self.delta {
            delta.add_delta(layer, p, input, out);
        }
    }
}

/// Causal multi-head attention for the newest query over the cached keys.
/// `probs_out`, when given, receives the per-head attention weights
/// (`n_heads × len` row-major, zeros at masked keys).
pub(crate) fn attend<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    key_mask: &[bool],
    n_heads: usize,
    ctx: &mut [T],
    mut probs_out: Option<&mut Vec<T>>,
) {
    let d = q.len();
    let hd = d / n_heads;
    let len = key_mask.len();
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let valid: Vec<usize> = (0..len).filter(|&j| key_mask[j]).collect();
    if let Some(p) = probs_out.as_deref_mut() {
        p.clear();
        p.resize(n_heads * len, T::zero());
    }
    let mut scores = vec![T::zero(); valid.len()];
    for h in 0..n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let out = &mut ctx[h * hd..(h + 1) * hd];
        out.iter_mut().for_each(|o| *o = T::zero());
        if valid.is_empty() {
            continue;
        }
        for (s, &j) in scores.iter_mut().zip(&valid) {
            *s = dot(qh, &keys[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
        }
        softmax_in_place(&mut scores);
        for (&w, &j) in scores.iter().zip(&valid) {
            let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for (o, &vv) in out.iter_mut().zip(vh) {
                *o += w * vv;
            }
        }
        if let Some(p) = probs_out.as_deref_mut() {
            for (&w, &j) in scores.iter().zip(&valid) {
                p[h * len + j] = w;
            }
        }
    }
}

/// Rotary embedding in the split-half layout: dimension `i` of each head is
/// paired with `i + head_dim/2` and rotated by `pos · theta^(-2i/head_dim)`.
#[derive(Debug, Clone)]
pub(crate) struct RopeTable {
    inv_freq: Vec<f64>,
}

impl RopeTable {
    pub(crate) fn new(head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let inv_freq = (0..half)
            .map(|i| Float::powf(theta, -(2.0 * i as f64) / head_dim as f64))
            .collect();
        Self { inv_freq }
    }

    fn cos_sin(&self, pos: usize, i: usize) -> (f64, f64) {
        let angle = pos as f64 * self.inv_freq[i];
        (Float::cos(angle), Float::sin(angle))
    }

    pub(crate) fn apply<T: Real>(&self, x: &mut [T], pos: usize, n_heads: usize) {
        let hd = x.len() / n_heads;
        let half = hd / 2;
        for i in 0..half {
            let (c, s) = self.cos_sin(pos, i);
            let (c, s) = (T::from_f64(c), T::from_f64(s));
            for h in 0..n_heads {
                let a = x[h * hd + i];
                let b = x[h * hd + i + half];
                x[h * hd + i] = a * c - b * s;
                x[h * hd + i + half] = a * s + b * c;
            }
        }
    }

    /// Transpose of [`apply`](Self::apply), for backpropagation.
    pub(crate) fn apply_transpose<T: Real>(&self, x: &mut [T], pos: usize, n_heads: usize) {
        let hd = x.len() / n_heads;
        let half = hd / 2;
        for i in 0..half {
            let (c, s) = self.cos_sin(pos, i);
            let (c, s) = (T::from_f64(c), T::from_f64(s));
            for h in 0..n_heads {
                let a = x[h * hd + i];
                let b = x[h * hd + i + half];
                x[h * hd + i] = a * c + b * s;
                x[h * hd + i + half] = -a * s + b * c;
            }
        }
    }
}

fn run<'h, T: Real>(
    mut session: Session<'_, T>,
    token_ids: &[u32],
    attention_mask: &[u8],
    mut hook: Option<&mut (dyn ActivationHook<T> + 'h)>,
) -> Result<Matrix<T>> {
    let c = &session.model.config;
    if attention_mask.len() != token_ids.len() {
        return Err(crate::error::shape_err(
            "forward",
            alloc::format!("{} tokens", token_ids.len()),
            alloc::format!("{} mask entries", attention_mask.len()),
        ));
    }
    if token_ids.len() > c.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: token_ids.len(),
            max: c.max_seq_len,
        });
    }
    let vocab = c.vocab_size;
    let mut logits = Matrix::zeros(token_ids.len(), vocab);
    for (t, (&tok, &m)) in token_ids.iter().zip(attention_mask).enumerate() {
        let row = session.step(tok, m != 0, hook.as_deref_mut())?;
        logits.row_mut(t).copy_from_slice(&row);
    }
    Ok(logits)
}

/// Logits `[T × vocab]` for a whole sequence.
pub fn forward<T: Real>(
    model: &ModelBundle<T>,
    token_ids: &[u32],
    attention_mask: &[u8],
    hook: Option<&mut dyn ActivationHook<T>>,
) -> Result<Matrix<T>> {
    run(Session::new(model), token_ids, attention_mask, hook)
}

/// [`forward`] with an additive projection correction (unmerged adapters).
pub fn forward_with_delta<T: Real>(
    model: &ModelBundle<T>,
    delta: &dyn ProjectionDelta<T>,
    token_ids: &[u32],
    attention_mask: &[u8],
    hook: Option<&mut dyn ActivationHook<T>>,
) -> Result<Matrix<T>> {
    run(Session::with_delta(model, delta), token_ids, attention_mask, hook)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn toy(seed: u64) -> ModelBundle<f32> {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 24,
            n_heads: 2,
            vocab_size: 262,
            norm_eps: 1e-6,
            rope_theta: 10000.0,
            max_seq_len: 32,
            bos_id: 1,
            eos_id: 2,
            pad_id: 0,
        };
        ModelBundle::random(cfg, seed, 1.0).unwrap()
    }

    struct Recorder(Vec<(usize, usize, Vec<f32>)>);
    impl ActivationHook<f32> for Recorder {
        fn on_mlp_activation(&mut self, layer: usize, position: usize, h: &mut [f32]) {
            self.0.push((layer, position, h.to_vec()));
        }
    }

    #[test]
    fn single_token_shape() {
        let m = toy(1);
        let out = forward(&m, &[5], &[1], None).unwrap();
        assert_eq!(out.shape(), (1, 262));
    }

    #[test]
    fn errors() {
        let m = toy(1);
        assert!(matches!(
            forward(&m, &[999], &[1], None),
            Err(Error::TokenOutOfRange { .. })
        ));
        let long = vec![5u32; 40];
        assert!(matches!(
            forward(&m, &long, &[1; 40], None),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(forward(&m, &[5, 6], &[1], None).is_err());
    }

    #[test]
    fn hook_sees_every_layer_and_position_without_changing_logits() {
        let m = toy(2);
        let toks = [1, 40, 41, 42];
        let plain = forward(&m, &toks, &[1; 4], None).unwrap();
        let mut rec = Recorder(Vec::new());
        let hooked = forward(&m, &toks, &[1; 4], Some(&mut rec)).unwrap();
        assert_eq!(plain, hooked);
        assert_eq!(rec.0.len(), 2 * 4);
        assert!(rec.0.iter().all(|(_, _, h)| h.len() == 24));
    }

    #[test]
    fn zero_mlp_matches_attention_only_path() {
        let mut m = toy(3);
        for l in &mut m.layers {
            l.mlp_down = Matrix::zeros(16, 24);
        }
        // With a zero down-projection the MLP branch adds exact zeros, so
        // zeroing gate/up too must not change anything.
        let mut m2 = m.clone();
        for l in &mut m2.layers {
            l.mlp_gate = Matrix::zeros(24, 16);
            l.mlp_up = Matrix::zeros(24, 16);
        }
        let toks = [1, 7, 8];
        assert_eq!(
            forward(&m, &toks, &[1; 3], None).unwrap(),
            forward(&m2, &toks, &[1; 3], None).unwrap()
        );
    }

    #[test]
    fn rope_transpose_inverts_rotation() {
        let table = RopeTable::new(8, 10000.0);
        let mut x: Vec<f64> = (0..16).map(|i| i as f64 * 0.37 - 2.0).collect();
        let orig = x.clone();
        table.apply(&mut x, 5, 2);
        table.apply_transpose(&mut x, 5, 2);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn causality(seed in 0u64..1000, edit_at in 1usize..6) {
            let m = toy(seed % 7);
            let mut rng = SplitMix64::new(seed);
            let toks: Vec<u32> = (0..6).map(|_| 3 + rng.below(256) as u32).collect();
            let mut edited = toks.clone();
            for t in edited.iter_mut().skip(edit_at) {
                *t = 3 + rng.below(256) as u32;
            }
            let a = forward(&m, &toks, &[1; 6], None).unwrap();
            let b = forward(&m, &edited, &[1; 6], None).unwrap();
            for t in 0..edit_at {
                prop_assert_eq!(a.row(t), b.row(t));
            }
        }

        #[test]
        fn padding_invariance(seed in 0u64..1000, n_pad in 1usize..5) {
            let m = toy(seed % 5);
            let mut rng = SplitMix64::new(seed);
            let toks: Vec<u32> = (0..4).map(|_| 3 + rng.below(256) as u32).collect();
            let a = forward(&m, &toks, &[1; 4], None).unwrap();
            let mut padded = toks.clone();
            padded.extend(core::iter::repeat_n(0, n_pad));
            let mut mask = vec![1u8; 4];
            mask.extend(core::iter::repeat_n(0, n_pad));
            let b = forward(&m, &padded, &mask, None).unwrap();
            for t in 0..4 {
                prop_assert_eq!(a.row(t), b.row(t));
            }
        }
    }
}
