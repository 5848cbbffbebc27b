use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{ModelBundle, Proj, ProjectionDelta};
use crate::rng::SplitMix64;
use crate::tensor::{matmul, matvec, Matrix, Real};

use super::LoraConfig;

/// Factors for one adapted matrix `W: [d_out × d_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterFactors<T> {
    pub layer: usize,
    pub proj: Proj,
    /// `[r × d_in]`
    pub a: Matrix<T>,
    /// `[d_out × r]`
    pub b: Matrix<T>,
}

/// A set of adapters over one base model. The base weights are never
/// modified; the adapter acts as an additive [`ProjectionDelta`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    pub factors: Vec<AdapterFactors<T>>,
    index: Vec<[Option<usize>; 7]>,
}

fn slot(p: Proj) -> usize {
    Proj::ALL.iter().position(|&q| q == p).unwrap_or_default()
}

impl<T: Real> LoraAdapter<T> {
    /// Adapter from explicit factors, checked for consistent rank.
    pub fn new(rank: usize, alpha: f64, n_layers: usize, factors: Vec<AdapterFactors<T>>) -> Result<Self> {
        if rank == 0 || alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!("bad adapter rank {rank} / alpha {alpha}")));
        }
        let mut index = alloc::vec![[None; 7]; n_layers];
        for (i, f) in factors.iter().enumerate() {
            if f.layer >= n_layers {
                return Err(Error::UnknownTarget(f.proj.tensor_name(f.layer)));
            }
            if f.a.rows() != rank || f.b.cols() != rank {
                return Err(shape_err(
                    "LoraAdapter",
                    format!("rank {rank}"),
                    format!("A {:?}, B {:?}", f.a.shape(), f.b.shape()),
                ));
            }
            index[f.layer][slot(f.proj)] = Some(i);
        }
        Ok(Self {
            rank,
            alpha,
            factors,
            index,
        })
    }

    pub fn scale(&self) -> T {
        T::from_f64(self.alpha / self.rank as f64)
    }

    pub fn get(&self, layer: usize, proj: Proj) -> Option<&AdapterFactors<T>> {
        self.index.get(layer)?[slot(proj)].map(|i| &self.factors[i])
    }

    pub fn index_of(&self, layer: usize, proj: Proj) -> Option<usize> {
        self.index.get(layer)?[slot(proj)]
    }

    pub fn n_layers(&self) -> usize {
        self.index.len()
    }

    /// Checks every factor against the matching base projection.
    pub fn check_against(&self, model: &ModelBundle<T>) -> Result<()> {
        if self.n_layers() != model.config.n_layers {
            return Err(shape_err(
                "adapter vs model",
                format!("{} layers", self.n_layers()),
                format!("{} layers", model.config.n_layers),
            ));
        }
        for f in &self.factors {
            let w = model.layers[f.layer].proj(f.proj);
            if f.a.cols() != w.cols() || f.b.rows() != w.rows() {
                return Err(shape_err(
                    "adapter vs model",
                    format!("{} is {:?}", f.proj.tensor_name(f.layer), w.shape()),
                    format!("A {:?}, B {:?}", f.a.shape(), f.b.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `(α/r) · B · A` for one factor pair.
    pub fn delta_matrix(&self, f: &AdapterFactors<T>) -> Result<Matrix<T>> {
        let mut ba = matmul(&f.b, &f.a)?;
        let s = self.scale();
        ba.data_mut().iter_mut().for_each(|v| *v *= s);
        Ok(ba)
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            factors: self
                .factors
                .iter()
                .map(|f| AdapterFactors {
                    layer: f.layer,
                    proj: f.proj,
                    a: f.a.cast(),
                    b: f.b.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn param_count(&self) -> u64 {
        self.factors.iter().map(|f| (f.a.data().len() + f.b.data().len()) as u64).sum()
    }
}

impl<T: Real> ProjectionDelta<T> for LoraAdapter<T> {
    fn add_delta(&self, layer: usize, proj: Proj, input: &[T], out: &mut [T]) {
        if let Some(f) = self.get(layer, proj) {
            let u = matvec(&f.a, input);
            let s = self.scale();
            for (o, bu) in out.iter_mut().zip(matvec(&f.b, &u)) {
                *o += s * bu;
            }
        }
    }
}

/// Fresh adapters on every target projection of every layer:
/// `A ~ N(0, 1/r)` (standard deviation `1/√r`), `B = 0`.
pub fn attach_adapters<T: Real>(model: &ModelBundle<T>, config: &LoraConfig, init_seed: u64) -> Result<LoraAdapter<T>> {
    config.validate()?;
    let projs = config.target_projs()?;
    let r = config.rank;
    let std = 1.0 / Float::sqrt(r as f64);
    let mut factors = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for &p in &projs {
            let w = layer.proj(p);
            let mut rng = SplitMix64::derive(init_seed, (l * 7 + slot(p)) as u64);
            let a = Matrix::from_fn(r, w.cols(), |_, _| T::from_f64(rng.normal() * std));
            let b = Matrix::zeros(w.rows(), r);
            factors.push(AdapterFactors { layer: l, proj: p, a, b });
        }
    }
    LoraAdapter::new(r, config.alpha, model.config.n_layers, factors)
}

/// Folds the adapters into the base weights: `W' = W + (α/r)·B·A`.
pub fn merge_adapters<T: Real>(model: &ModelBundle<T>, adapter: &LoraAdapter<T>) -> Result<ModelBundle<T>> {
    adapter.check_against(model)?;
    let mut out = model.clone();
    for f in &adapter.factors {
        let d = adapter.delta_matrix(f)?;
        let w = out.layers[f.layer].proj_mut(f.proj);
        for (wv, dv) in w.data_mut().iter_mut().zip(d.data()) {
            *wv += *dv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, forward_with_delta, ModelConfig};
    use alloc::vec;

    pub(crate) fn toy_cfg() -> ModelConfig {
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

    #[test]
    fn fresh_attach_is_a_no_op() {
        let m = ModelBundle::<f32>::random(toy_cfg(), 1, 1.0).unwrap();
        let a = attach_adapters(&m, &LoraConfig::math_preset(), 4).unwrap();
        assert_eq!(a.factors.len(), 14);
        let toks = [1, 50, 60, 70];
        let base = forward(&m, &toks, &[1; 4], None).unwrap();
        let adapted = forward_with_delta(&m, &a, &toks, &[1; 4], None).unwrap();
        assert_eq!(base, adapted);
        assert_eq!(merge_adapters(&m, &a).unwrap(), m);
    }

    #[test]
    fn one_by_one_closed_form() {
        let f = AdapterFactors {
            layer: 0,
            proj: Proj::Q,
            a: Matrix::from_vec(1, 1, vec![1.0f64]).unwrap(),
            b: Matrix::from_vec(1, 1, vec![1.0f64]).unwrap(),
        };
        let ad = LoraAdapter::new(1, 2.0, 1, vec![f]).unwrap();
        let mut out = [0.5f64];
        ad.add_delta(0, Proj::Q, &[3.0], &mut out);
        assert_eq!(out[0], 0.5 + 2.0 * 3.0);
        let mut untouched = [0.5f64];
        ad.add_delta(0, Proj::K, &[3.0], &mut untouched);
        assert_eq!(untouched[0], 0.5);
    }

    #[test]
    fn merged_matches_unmerged() {
        let m = ModelBundle::<f32>::random(toy_cfg(), 2, 1.0).unwrap();
        let mut a = attach_adapters(&m, &LoraConfig::code_preset(), 9).unwrap();
        let mut rng = SplitMix64::new(3);
        for f in &mut a.factors {
            f.b.data_mut().iter_mut().for_each(|v| *v = (rng.normal() * 0.01) as f32);
        }
        let merged = merge_adapters(&m, &a).unwrap();
        assert_eq!(merged.param_count(), m.param_count());
        let toks = [1, 40, 90, 33, 7];
        let x = forward(&merged, &toks, &[1; 5], None).unwrap();
        let y = forward_with_delta(&m, &a, &toks, &[1; 5], None).unwrap();
        assert!(x.max_abs_diff(&y) <= 1e-5, "{}", x.max_abs_diff(&y));
    }
}
