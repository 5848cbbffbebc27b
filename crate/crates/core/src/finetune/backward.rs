//! Reverse-mode gradients of the next-token loss.
//!
//! The forward half mirrors [`Session::step`](crate::model::Session::step)
//! kernel for kernel, so without dropout its logits equal the inference
//! path exactly. The backward half walks the recorded trace in reverse.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::{attend, ModelBundle, Proj, RopeTable};
use crate::rng::SplitMix64;
use crate::tensor::{dot, matvec, matvec_into, matvec_t_acc, outer_acc, rmsnorm_into, silu, silu_grad, Matrix, Real};

use super::lora::LoraAdapter;

/// Tensors that receive gradients.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainableSet {
    /// Both factors of every adapter.
    pub lora: bool,
    /// Base projection weights, by layer.
    pub base: Vec<(usize, Proj)>,
}

impl TrainableSet {
    pub fn lora() -> Self {
        Self {
            lora: true,
            base: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// Mean cross-entropy over the supervised positions.
    pub loss: f64,
    pub n_positions: usize,
    /// `∂loss/∂A`, aligned with the adapter's factor list.
    pub lora_a: Vec<Matrix<T>>,
    /// `∂loss/∂B`, aligned with the adapter's factor list.
    pub lora_b: Vec<Matrix<T>>,
    /// `∂loss/∂W` for each requested base projection.
    pub base: Vec<(usize, Proj, Matrix<T>)>,
}

/// Dropout on adapter inputs: each input element is kept with probability
/// `1 − rate` and rescaled by `1 / (1 − rate)`.
pub(crate) struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut SplitMix64,
}

impl Dropout<'_> {
    fn mask<T: Real>(&mut self, n: usize) -> Vec<T> {
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        (0..n)
            .map(|_| if self.rng.next_f64() < self.rate { T::zero() } else { keep })
            .collect()
    }
}

struct AdapterRec<T> {
    mask: Option<Vec<T>>,
    u: Vec<T>,
}

#[derive(Default)]
struct LayerTrace<T> {
    x_in: Vec<Vec<T>>,
    xn1: Vec<Vec<T>>,
    inv1: Vec<T>,
    probs: Vec<Vec<T>>,
    ctx: Vec<Vec<T>>,
    x_mid: Vec<Vec<T>>,
    xn2: Vec<Vec<T>>,
    inv2: Vec<T>,
    gate: Vec<Vec<T>>,
    up: Vec<Vec<T>>,
    h: Vec<Vec<T>>,
    q: Vec<Vec<T>>,
    keys: Vec<T>,
    values: Vec<T>,
    adapters: Vec<[Option<AdapterRec<T>>; 7]>,
}

struct Trace<T> {
    layers: Vec<LayerTrace<T>>,
    x_out: Vec<Vec<T>>,
    xnf: Vec<Vec<T>>,
    invf: Vec<T>,
    logits: Vec<Vec<T>>,
}

fn slot(p: Proj) -> usize {
    Proj::ALL.iter().position(|&q| q == p).unwrap_or_default()
}

struct Ctx<'a, T: Real> {
    model: &'a ModelBundle<T>,
    adapter: Option<&'a LoraAdapter<T>>,
}

impl<T: Real> Ctx<'_, T> {
    fn project(
        &self,
        layer: usize,
        p: Proj,
        x: &[T],
        out: &mut [T],
        dropout: &mut Option<Dropout<'_>>,
    ) -> Option<AdapterRec<T>> {
        let w = self.model.layers[layer].proj(p);
        matvec_into(w, x, out);
        let ad = self.adapter?;
        let f = ad.get(layer, p)?;
        let mask = dropout.as_mut().filter(|d| d.rate > 0.0).map(|d| d.mask::<T>(x.len()));
        let u = match &mask {
            Some(m) => {
                let xd: Vec<T> = x.iter().zip(m).map(|(&a, &b)| a * b).collect();
                matvec(&f.a, &xd)
            }
            None => matvec(&f.a, x),
        };
        let s = ad.scale();
        for (o, bu) in out.iter_mut().zip(matvec(&f.b, &u)) {
            *o += s * bu;
        }
        Some(AdapterRec { mask, u })
    }

    fn trace(&self, tokens: &[u32], mut dropout: Option<Dropout<'_>>) -> Result<Trace<T>> {
        let model = self.model;
        let c = &model.config;
        let (d, n_t) = (c.d_model, tokens.len());
        if n_t > c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n_t,
                max: c.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: c.vocab_size,
            });
        }
        let eps = T::from_f64(c.norm_eps);
        let rope = RopeTable::new(c.head_dim(), c.rope_theta);
        let key_mask = vec![true; n_t];
        let mut layers: Vec<LayerTrace<T>> = (0..c.n_layers).map(|_| LayerTrace::default()).collect();
        let mut tr = Trace {
            layers: Vec::new(),
            x_out: Vec::with_capacity(n_t),
            xnf: Vec::with_capacity(n_t),
            invf: Vec::with_capacity(n_t),
            logits: Vec::with_capacity(n_t),
        };
        for (pos, &tok) in tokens.iter().enumerate() {
            let mut x = model.embed.row(tok as usize).to_vec();
            for (li, layer) in model.layers.iter().enumerate() {
                let lt = &mut layers[li];
                let mut recs: [Option<AdapterRec<T>>; 7] = Default::default();
                let mut xn = vec![T::zero(); d];
                let inv = rmsnorm_into(&x, &layer.norm_attn, eps, &mut xn);
                let (mut q, mut k, mut v) = (vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]);
                recs[slot(Proj::Q)] = self.project(li, Proj::Q, &xn, &mut q, &mut dropout);
                recs[slot(Proj::K)] = self.project(li, Proj::K, &xn, &mut k, &mut dropout);
                recs[slot(Proj::V)] = self.project(li, Proj::V, &xn, &mut v, &mut dropout);
                rope.apply(&mut q, pos, c.n_heads);
                rope.apply(&mut k, pos, c.n_heads);
                lt.keys.extend_from_slice(&k);
                lt.values.extend_from_slice(&v);
                let mut ctx = vec![T::zero(); d];
                let mut probs = Vec::new();
                attend(&q, &lt.keys, &lt.values, &key_mask[..=pos], c.n_heads, &mut ctx, Some(&mut probs));
                let mut o = vec![T::zero(); d];
                recs[slot(Proj::O)] = self.project(li, Proj::O, &ctx, &mut o, &mut dropout);
                lt.x_in.push(x.clone());
                for (xi, &a) in x.iter_mut().zip(&o) {
                    *xi += a;
                }
                let f = layer.mlp_gate.rows();
                let mut xn2 = vec![T::zero(); d];
                let inv2 = rmsnorm_into(&x, &layer.norm_mlp, eps, &mut xn2);
                let (mut g, mut u) = (vec![T::zero(); f], vec![T::zero(); f]);
                recs[slot(Proj::Gate)] = self.project(li, Proj::Gate, &xn2, &mut g, &mut dropout);
                recs[slot(Proj::Up)] = self.project(li, Proj::Up, &xn2, &mut u, &mut dropout);
                let h: Vec<T> = g.iter().zip(&u).map(|(&gi, &ui)| silu(gi) * ui).collect();
                let mut m = vec![T::zero(); d];
                recs[slot(Proj::Down)] = self.project(li, Proj::Down, &h, &mut m, &mut dropout);
                lt.x_mid.push(x.clone());
                for (xi, &mv) in x.iter_mut().zip(&m) {
                    *xi += mv;
                }
                lt.xn1.push(xn);
                lt.inv1.push(inv);
                lt.q.push(q);
                lt.probs.push(probs);
                lt.ctx.push(ctx);
                lt.xn2.push(xn2);
                lt.inv2.push(inv2);
                lt.gate.push(g);
                lt.up.push(u);
                lt.h.push(h);
                lt.adapters.push(recs);
            }
            let mut xn = vec![T::zero(); d];
            let inv = rmsnorm_into(&x, &model.final_norm, eps, &mut xn);
            let mut logits = vec![T::zero(); c.vocab_size];
            matvec_into(&model.head, &xn, &mut logits);
            tr.x_out.push(x);
            tr.xnf.push(xn);
            tr.invf.push(inv);
            tr.logits.push(logits);
        }
        tr.layers = layers;
        Ok(tr)
    }
}

/// Positions `t` whose logits predict `tokens[t + 1]` with `loss_mask[t + 1]`
/// set.
fn supervised(tokens: &[u32], loss_mask: &[u8]) -> Result<Vec<usize>> {
    if tokens.len() != loss_mask.len() {
        return Err(crate::error::shape_err(
            "loss mask",
            alloc::format!("{} tokens", tokens.len()),
            alloc::format!("{} mask entries", loss_mask.len()),
        ));
    }
    let pos: Vec<usize> = (0..tokens.len().saturating_sub(1)).filter(|&t| loss_mask[t + 1] != 0).collect();
    if pos.is_empty() {
        return Err(Error::AllMasked);
    }
    Ok(pos)
}

/// `(−log p(target), softmax)` in 64-bit.
fn cross_entropy<T: Real>(logits: &[T], target: u32) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = logits.iter().map(|v| Float::exp(v.as_f64() - max)).collect();
    let z: f64 = exps.iter().sum();
    let lse = max + Float::ln(z);
    let p = exps.into_iter().map(|e| e / z).collect();
    (lse - logits[target as usize].as_f64(), p)
}

/// Mean next-token cross-entropy over the completion positions marked in
/// `loss_mask` (token `t` is predicted from position `t − 1`).
pub fn loss<T: Real>(
    model: &ModelBundle<T>,
    adapter: Option<&LoraAdapter<T>>,
    tokens: &[u32],
    loss_mask: &[u8],
) -> Result<f64> {
    let pos = supervised(tokens, loss_mask)?;
    let tr = Ctx { model, adapter }.trace(tokens, None)?;
    let total: f64 = pos.iter().map(|&t| cross_entropy(&tr.logits[t], tokens[t + 1]).0).sum();
    Ok(total / pos.len() as f64)
}

/// Loss and gradients for one sequence. The sequence is unpadded; every
/// token attends to all earlier ones.
pub fn backward<T: Real>(
    model: &ModelBundle<T>,
    adapter: Option<&LoraAdapter<T>>,
    tokens: &[u32],
    loss_mask: &[u8],
    trainable: &TrainableSet,
) -> Result<Gradients<T>> {
    backward_impl(model, adapter, tokens, loss_mask, trainable, None)
}

#[allow(clippy::needless_range_loop)]
pub(crate) fn backward_impl<T: Real>(
    model: &ModelBundle<T>,
    adapter: Option<&LoraAdapter<T>>,
    tokens: &[u32],
    loss_mask: &[u8],
    trainable: &TrainableSet,
    dropout: Option<Dropout<'_>>,
) -> Result<Gradients<T>> {
    if let Some(a) = adapter {
        a.check_against(model)?;
    }
    let pos = supervised(tokens, loss_mask)?;
    let cx = Ctx { model, adapter };
    let tr = cx.trace(tokens, dropout)?;
    let c = &model.config;
    let (d, n_t, nh) = (c.d_model, tokens.len(), c.n_heads);
    let hd = c.head_dim();
    let rope = RopeTable::new(hd, c.rope_theta);
    let inv_n = 1.0 / pos.len() as f64;

    let mut g = Grads::new(model, adapter, trainable);
    let mut total = 0.0;
    let mut dx: Vec<Vec<T>> = vec![vec![T::zero(); d]; n_t];
    for &t in &pos {
        let (l, p) = cross_entropy(&tr.logits[t], tokens[t + 1]);
        total += l;
        let mut dlogits: Vec<T> = p.iter().map(|&v| T::from_f64(v * inv_n)).collect();
        dlogits[tokens[t + 1] as usize] -= T::from_f64(inv_n);
        let mut dxn = vec![T::zero(); d];
        matvec_t_acc(&model.head, &dlogits, &mut dxn);
        rms_backward(&tr.x_out[t], &model.final_norm, tr.invf[t], &dxn, &mut dx[t]);
    }

    for li in (0..c.n_layers).rev() {
        let lt = &tr.layers[li];
        let layer = &model.layers[li];
        let f = layer.mlp_gate.rows();
        // MLP branch: dx stays as the residual gradient and collects the
        // branch contribution through the second norm.
        for t in 0..n_t {
            let dy = dx[t].clone();
            let mut dh = vec![T::zero(); f];
            g.project_back(&cx, li, Proj::Down, &lt.h[t], lt.adapters[t][slot(Proj::Down)].as_ref(), &dy, &mut dh);
            let mut dgate = vec![T::zero(); f];
            let mut dup = vec![T::zero(); f];
            for j in 0..f {
                let gj = lt.gate[t][j];
                dgate[j] = dh[j] * lt.up[t][j] * silu_grad(gj);
                dup[j] = dh[j] * silu(gj);
            }
            let mut dxn2 = vec![T::zero(); d];
            g.project_back(&cx, li, Proj::Gate, &lt.xn2[t], lt.adapters[t][slot(Proj::Gate)].as_ref(), &dgate, &mut dxn2);
            g.project_back(&cx, li, Proj::Up, &lt.xn2[t], lt.adapters[t][slot(Proj::Up)].as_ref(), &dup, &mut dxn2);
            rms_backward(&lt.x_mid[t], &layer.norm_mlp, lt.inv2[t], &dxn2, &mut dx[t]);
        }
        // Attention branch.
        let mut dq: Vec<Vec<T>> = vec![vec![T::zero(); d]; n_t];
        let mut dk: Vec<Vec<T>> = vec![vec![T::zero(); d]; n_t];
        let mut dv: Vec<Vec<T>> = vec![vec![T::zero(); d]; n_t];
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        for t in 0..n_t {
            let mut dctx = vec![T::zero(); d];
            let dy = dx[t].clone();
            g.project_back(&cx, li, Proj::O, &lt.ctx[t], lt.adapters[t][slot(Proj::O)].as_ref(), &dy, &mut dctx);
            let len = t + 1;
            for h in 0..nh {
                let r = h * hd..(h + 1) * hd;
                let probs = &lt.probs[t][h * len..(h + 1) * len];
                let dch = &dctx[r.clone()];
                let dp: Vec<T> = (0..len).map(|j| dot(dch, &lt.values[j * d + h * hd..j * d + (h + 1) * hd])).collect();
                let mut mix = T::zero();
                for (&p, &dpj) in probs.iter().zip(&dp) {
                    mix += p * dpj;
                }
                let qh = &lt.q[t][r.clone()];
                for j in 0..len {
                    let ds = probs[j] * (dp[j] - mix) * scale;
                    let kj = &lt.keys[j * d + h * hd..j * d + (h + 1) * hd];
                    for i in 0..hd {
                        dq[t][h * hd + i] += ds * kj[i];
                        dk[j][h * hd + i] += ds * qh[i];
                        dv[j][h * hd + i] += probs[j] * dch[i];
                    }
                }
            }
        }
        for t in 0..n_t {
            rope.apply_transpose(&mut dq[t], t, nh);
            rope.apply_transpose(&mut dk[t], t, nh);
            let mut dxn1 = vec![T::zero(); d];
            let recs = &lt.adapters[t];
            g.project_back(&cx, li, Proj::Q, &lt.xn1[t], recs[slot(Proj::Q)].as_ref(), &dq[t], &mut dxn1);
            g.project_back(&cx, li, Proj::K, &lt.xn1[t], recs[slot(Proj::K)].as_ref(), &dk[t], &mut dxn1);
            g.project_back(&cx, li, Proj::V, &lt.xn1[t], recs[slot(Proj::V)].as_ref(), &dv[t], &mut dxn1);
            rms_backward(&lt.x_in[t], &layer.norm_attn, lt.inv1[t], &dxn1, &mut dx[t]);
        }
    }

    Ok(Gradients {
        loss: total * inv_n,
        n_positions: pos.len(),
        lora_a: g.lora_a,
        lora_b: g.lora_b,
        base: g.base,
    })
}

/// `dx += ∂(w ⊙ x · r)/∂x · dy` with `r` the inverse RMS of `x`.
fn rms_backward<T: Real>(x: &[T], w: &[T], inv: T, dy: &[T], dx: &mut [T]) {
    let n = T::from_f64(x.len() as f64);
    let mut s = T::zero();
    for ((&xi, &wi), &di) in x.iter().zip(w).zip(dy) {
        s += wi * di * xi;
    }
    let k = inv * inv * inv * s / n;
    for (((o, &xi), &wi), &di) in dx.iter_mut().zip(x).zip(w).zip(dy) {
        *o += inv * wi * di - k * xi;
    }
}

struct Grads<T> {
    lora: bool,
    lora_a: Vec<Matrix<T>>,
    lora_b: Vec<Matrix<T>>,
    base: Vec<(usize, Proj, Matrix<T>)>,
}

impl<T: Real> Grads<T> {
    fn new(model: &ModelBundle<T>, adapter: Option<&LoraAdapter<T>>, set: &TrainableSet) -> Self {
        let lora = set.lora && adapter.is_some();
        let (mut la, mut lb) = (Vec::new(), Vec::new());
        if let (true, Some(a)) = (lora, adapter) {
            for f in &a.factors {
                la.push(Matrix::zeros(f.a.rows(), f.a.cols()));
                lb.push(Matrix::zeros(f.b.rows(), f.b.cols()));
            }
        }
        let base = set
            .base
            .iter()
            .map(|&(l, p)| {
                let w = model.layers[l].proj(p);
                (l, p, Matrix::zeros(w.rows(), w.cols()))
            })
            .collect();
        Self {
            lora,
            lora_a: la,
            lora_b: lb,
            base,
        }
    }

    /// Backpropagates `dy` through `y = W·x + s·B·A·(x ⊙ mask)` into `dx`
    /// and the requested parameter gradients.
    #[allow(clippy::too_many_arguments)]
    fn project_back(
        &mut self,
        cx: &Ctx<'_, T>,
        layer: usize,
        p: Proj,
        x: &[T],
        rec: Option<&AdapterRec<T>>,
        dy: &[T],
        dx: &mut [T],
    ) {
        let w = cx.model.layers[layer].proj(p);
        if let Some(entry) = self.base.iter_mut().find(|e| e.0 == layer && e.1 == p) {
            outer_acc(&mut entry.2, dy, x, T::one());
        }
        matvec_t_acc(w, dy, dx);
        let (Some(ad), Some(rec)) = (cx.adapter, rec) else {
            return;
        };
        let Some(idx) = ad.index_of(layer, p) else {
            return;
        };
        let f = &ad.factors[idx];
        let s = ad.scale();
        let mut du = vec![T::zero(); ad.rank];
        matvec_t_acc(&f.b, dy, &mut du);
        du.iter_mut().for_each(|v| *v *= s);
        let xd: Vec<T> = match &rec.mask {
            Some(m) => x.iter().zip(m).map(|(&a, &b)| a * b).collect(),
            None => x.to_vec(),
        };
        if self.lora {
            outer_acc(&mut self.lora_b[idx], dy, &rec.u, s);
            outer_acc(&mut self.lora_a[idx], &du, &xd, T::one());
        }
        let mut dxd = vec![T::zero(); x.len()];
        matvec_t_acc(&f.a, &du, &mut dxd);
        match &rec.mask {
            Some(m) => {
                for ((o, &v), &mk) in dx.iter_mut().zip(&dxd).zip(m) {
                    *o += v * mk;
                }
            }
            None => {
                for (o, &v) in dx.iter_mut().zip(&dxd) {
                    *o += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::{attach_adapters, LoraConfig};
    use crate::model::{forward, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            vocab_size: 262,
            norm_eps: 1e-6,
            rope_theta: 10000.0,
            max_seq_len: 16,
            bos_id: 1,
            eos_id: 2,
            pad_id: 0,
        }
    }

    fn small_lora(rank: usize, alpha: f64) -> LoraConfig {
        LoraConfig {
            rank,
            alpha,
            dropout: 0.0,
            ..LoraConfig::math_preset()
        }
    }

    const TOKS: [u32; 6] = [1, 40, 41, 60, 70, 2];
    const MASK: [u8; 6] = [0, 0, 0, 1, 1, 1];

    fn base_loss(m: &ModelBundle<f64>) -> f64 {
        let logits = forward(m, &TOKS, &[1; 6], None).unwrap();
        let mut total = 0.0;
        for t in 2..5 {
            total += cross_entropy(logits.row(t), TOKS[t + 1]).0;
        }
        total / 3.0
    }

    #[test]
    fn zero_init_loss_equals_base() {
        let m = ModelBundle::<f64>::random(cfg(), 1, 1.0).unwrap();
        let a = attach_adapters(&m, &small_lora(2, 4.0), 3).unwrap();
        let l0 = loss(&m, Some(&a), &TOKS, &MASK).unwrap();
        assert_eq!(l0, base_loss(&m));
        assert_eq!(loss(&m, None, &TOKS, &MASK).unwrap(), l0);
        assert_eq!(loss(&m, None, &TOKS, &[0; 6]), Err(Error::AllMasked));
    }

    #[test]
    fn zero_b_gives_zero_a_grad_and_b_grad_linear_in_alpha() {
        let m = ModelBundle::<f64>::random(cfg(), 2, 1.0).unwrap();
        let a1 = attach_adapters(&m, &small_lora(2, 2.0), 5).unwrap();
        let a2 = attach_adapters(&m, &small_lora(2, 4.0), 5).unwrap();
        let g1 = backward(&m, Some(&a1), &TOKS, &MASK, &TrainableSet::lora()).unwrap();
        let g2 = backward(&m, Some(&a2), &TOKS, &MASK, &TrainableSet::lora()).unwrap();
        assert!(g1.lora_a.iter().all(|ga| ga.data().iter().all(|&v| v == 0.0)));
        for (b1, b2) in g1.lora_b.iter().zip(&g2.lora_b) {
            for (&x, &y) in b1.data().iter().zip(b2.data()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
            }
        }
        assert!(g1.lora_b.iter().any(|b| b.data().iter().any(|&v| v != 0.0)));
    }

    /// Central differences on every entry of every adapter factor and of two
    /// base projections.
    #[test]
    fn finite_difference_check() {
        let m = ModelBundle::<f64>::random(cfg(), 3, 1.0).unwrap();
        let mut a = attach_adapters(&m, &small_lora(2, 4.0), 7).unwrap();
        let mut rng = SplitMix64::new(8);
        for f in &mut a.factors {
            f.b.data_mut().iter_mut().for_each(|v| *v = rng.normal() * 0.3);
        }
        let set = TrainableSet {
            lora: true,
            base: vec![(0, Proj::Down), (1, Proj::Q)],
        };
        let g = backward(&m, Some(&a), &TOKS, &MASK, &set).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        };
        for (i, ga) in g.lora_a.iter().enumerate() {
            for e in 0..ga.data().len() {
                let mut p = a.clone();
                p.factors[i].a.data_mut()[e] += h;
                let mut n = a.clone();
                n.factors[i].a.data_mut()[e] -= h;
                check(
                    ga.data()[e],
                    loss(&m, Some(&p), &TOKS, &MASK).unwrap(),
                    loss(&m, Some(&n), &TOKS, &MASK).unwrap(),
                );
            }
            let gb = &g.lora_b[i];
            for e in 0..gb.data().len() {
                let mut p = a.clone();
                p.factors[i].b.data_mut()[e] += h;
                let mut n = a.clone();
                n.factors[i].b.data_mut()[e] -= h;
                check(
                    gb.data()[e],
                    loss(&m, Some(&p), &TOKS, &MASK).unwrap(),
                    loss(&m, Some(&n), &TOKS, &MASK).unwrap(),
                );
            }
        }
        for (l, p, gw) in &g.base {
            for e in 0..gw.data().len() {
                let mut mp = m.clone();
                mp.layers[*l].proj_mut(*p).data_mut()[e] += h;
                let mut mn = m.clone();
                mn.layers[*l].proj_mut(*p).data_mut()[e] -= h;
                check(
                    gw.data()[e],
                    loss(&mp, Some(&a), &TOKS, &MASK).unwrap(),
                    loss(&mn, Some(&a), &TOKS, &MASK).unwrap(),
                );
            }
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }
}
