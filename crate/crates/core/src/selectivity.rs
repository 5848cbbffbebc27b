//! Per-neuron selectivity scores.
//!
//! `S = (μ_target − μ_distractor) / (σ + ε)` where the means run over each
//! label group and `σ` is the population standard deviation over all
//! prompts. Positive scores lean towards the target task, negative ones
//! towards the distractor.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::capture::{ActivationTensor, Label};
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

/// Scores and the statistics they were built from, each `L × d_ff`
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityScores {
    pub eps: f64,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_target: usize,
    pub n_distractor: usize,
    pub s: Vec<f64>,
    pub mu_target: Vec<f64>,
    pub mu_distractor: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SelectivityScores {
    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.s[layer * self.d_ff..(layer + 1) * self.d_ff]
    }

    #[inline]
    pub fn get(&self, layer: usize, neuron: usize) -> f64 {
        self.s[layer * self.d_ff + neuron]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_layers * self.d_ff;
        for (name, v) in [
            ("s", &self.s),
            ("mu_target", &self.mu_target),
            ("mu_distractor", &self.mu_distractor),
            ("sigma", &self.sigma),
        ] {
            if v.len() != n {
                return Err(shape_err(
                    "SelectivityScores",
                    alloc::format!("L={} d_ff={}", self.n_layers, self.d_ff),
                    alloc::format!("{name} has {} values", v.len()),
                ));
            }
        }
        if self.s.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite selectivity score".into()));
        }
        Ok(())
    }

    /// Copy with every score negated, as if the labels had been swapped.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.s.iter_mut().for_each(|v| *v = -*v);
        core::mem::swap(&mut out.mu_target, &mut out.mu_distractor);
        core::mem::swap(&mut out.n_target, &mut out.n_distractor);
        out
    }
}

/// Standardized difference for one neuron.
#[inline]
pub fn score(mu_target: f64, mu_distractor: f64, sigma: f64, eps: f64) -> f64 {
    (mu_target - mu_distractor) / (sigma + eps)
}

pub fn compute_selectivity(acts: &ActivationTensor, eps: f64) -> Result<SelectivityScores> {
    acts.validate()?;
    let n_t = acts.count(Label::Target);
    let n_d = acts.count(Label::Distractor);
    if n_t == 0 || n_d == 0 {
        return Err(Error::LabelCoverage {
            n_target: n_t,
            n_distractor: n_d,
        });
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!("eps must be >= 0, got {eps}")));
    }
    let (l, f, n) = (acts.n_layers, acts.d_ff, acts.n_prompts);
    let width = l * f;
    let mut sum_t = vec![0.0f64; width];
    let mut sum_d = vec![0.0f64; width];
    for (p, &label) in acts.labels.iter().enumerate() {
        let row = &acts.data[p * width..(p + 1) * width];
        let acc = match label {
            Label::Target => &mut sum_t,
            Label::Distractor => &mut sum_d,
        };
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let mean: Vec<f64> = sum_t.iter().zip(&sum_d).map(|(a, b)| (a + b) / n as f64).collect();
    let mut sq = vec![0.0f64; width];
    for p in 0..n {
        let row = &acts.data[p * width..(p + 1) * width];
        for ((s, &v), &m) in sq.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let mu_target: Vec<f64> = sum_t.iter().map(|s| s / n_t as f64).collect();
    let mu_distractor: Vec<f64> = sum_d.iter().map(|s| s / n_d as f64).collect();
    let sigma: Vec<f64> = sq.iter().map(|s| Float::sqrt(s / n as f64)).collect();
    let s = (0..width)
        .map(|i| score(mu_target[i], mu_distractor[i], sigma[i], eps))
        .collect();
    let scores = SelectivityScores {
        eps,
        n_layers: l,
        d_ff: f,
        n_target: n_t,
        n_distractor: n_d,
        s,
        mu_target,
        mu_distractor,
        sigma,
    };
    scores.validate()?;
    Ok(scores)
}

/// Sign census of one layer's scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub n_target_dominant: usize,
    pub n_distractor_dominant: usize,
    pub n_zero: usize,
}

pub fn layer_distribution(scores: &SelectivityScores) -> Vec<LayerCounts> {
    (0..scores.n_layers)
        .map(|l| {
            let mut c = LayerCounts {
                n_target_dominant: 0,
                n_distractor_dominant: 0,
                n_zero: 0,
            };
            for &v in scores.layer(l) {
                if v > 0.0 {
                    c.n_target_dominant += 1;
                } else if v < 0.0 {
                    c.n_distractor_dominant += 1;
                } else {
                    c.n_zero += 1;
                }
            }
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use alloc::string::String;
    use proptest::prelude::*;

    fn tensor(labels: &[Label], l: usize, f: usize, data: Vec<f64>) -> ActivationTensor {
        ActivationTensor::new(l, f, labels.to_vec(), data, String::new()).unwrap()
    }

    fn naive(acts: &ActivationTensor, eps: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..acts.n_layers {
            for j in 0..acts.d_ff {
                let vals: Vec<(f64, Label)> =
                    (0..acts.n_prompts).map(|p| (acts.get(p, l, j), acts.labels[p])).collect();
                let group = |lab| {
                    let g: Vec<f64> = vals.iter().filter(|v| v.1 == lab).map(|v| v.0).collect();
                    g.iter().sum::<f64>() / g.len() as f64
                };
                let all: Vec<f64> = vals.iter().map(|v| v.0).collect();
                let m = all.iter().sum::<f64>() / all.len() as f64;
                let var = all.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / all.len() as f64;
                out.push((group(Label::Target) - group(Label::Distractor)) / (var.sqrt() + eps));
            }
        }
        out
    }

    fn random_tensor(rng: &mut SplitMix64) -> ActivationTensor {
        let n = 2 + rng.below(15) as usize;
        let l = 1 + rng.below(3) as usize;
        let f = 1 + rng.below(8) as usize;
        let mut labels: Vec<Label> = (0..n)
            .map(|_| if rng.below(2) == 0 { Label::Target } else { Label::Distractor })
            .collect();
        labels[0] = Label::Target;
        labels[1] = Label::Distractor;
        let data = (0..n * l * f).map(|_| rng.next_f64() * 3.0).collect();
        tensor(&labels, l, f, data)
    }

    #[test]
    fn equal_means_score_zero() {
        let t = tensor(&[Label::Target, Label::Distractor], 1, 1, vec![0.4, 0.4]);
        assert_eq!(compute_selectivity(&t, DEFAULT_EPS).unwrap().s, [0.0]);
    }

    #[test]
    fn hand_oracle() {
        let t = tensor(&[Label::Target, Label::Distractor], 1, 1, vec![0.5, 0.8]);
        let s = compute_selectivity(&t, DEFAULT_EPS).unwrap();
        assert!((s.sigma[0] - 0.15).abs() < 1e-15);
        let want = -0.3 / (0.15 + 1e-6);
        assert!((s.s[0] - want).abs() < 1e-9);
        assert!((s.s[0] + 1.99999).abs() < 1e-5);
    }

    #[test]
    fn constant_neuron_is_guarded() {
        let t = tensor(
            &[Label::Target, Label::Target, Label::Distractor, Label::Distractor],
            1,
            1,
            vec![0.1, 0.1, 0.1, 0.1],
        );
        let s = compute_selectivity(&t, DEFAULT_EPS).unwrap();
        assert_eq!((s.s[0], s.sigma[0]), (0.0, 0.0));
        let g = score(0.1, 0.0, 0.0, DEFAULT_EPS);
        assert!((g - 1e5).abs() < 1e-6 && g.is_finite());
    }

    #[test]
    fn single_label_is_rejected() {
        let t = tensor(&[Label::Target, Label::Target], 1, 1, vec![0.1, 0.2]);
        assert!(matches!(
            compute_selectivity(&t, DEFAULT_EPS),
            Err(Error::LabelCoverage { n_target: 2, n_distractor: 0 })
        ));
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..100 {
            let t = random_tensor(&mut rng);
            let got = compute_selectivity(&t, DEFAULT_EPS).unwrap();
            for (a, b) in got.s.iter().zip(naive(&t, DEFAULT_EPS)) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn label_swap_negates() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..50 {
            let t = random_tensor(&mut rng);
            let mut sw = t.clone();
            sw.labels.iter_mut().for_each(|l| *l = l.swapped());
            let a = compute_selectivity(&t, 0.0).unwrap();
            let b = compute_selectivity(&sw, 0.0).unwrap();
            for (x, y) in a.s.iter().zip(&b.s) {
                if x.is_finite() {
                    assert_eq!(*x, -*y);
                }
            }
            let a = compute_selectivity(&t, DEFAULT_EPS).unwrap();
            let b = compute_selectivity(&sw, DEFAULT_EPS).unwrap();
            for (x, y) in a.s.iter().zip(&b.s) {
                assert!((x + y).abs() <= 1e-9 * x.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn distribution_counts() {
        let t = tensor(
            &[Label::Target, Label::Distractor],
            2,
            3,
            vec![1.0, 1.0, 0.5, 0.2, 0.2, 0.2, 0.0, 0.0, 0.4, 0.3, 0.3, 0.2],
        );
        let s = compute_selectivity(&t, DEFAULT_EPS).unwrap();
        let d = layer_distribution(&s);
        assert_eq!(
            d[0],
            LayerCounts {
                n_target_dominant: 3,
                n_distractor_dominant: 0,
                n_zero: 0
            }
        );
        assert_eq!((d[1].n_target_dominant, d[1].n_distractor_dominant, d[1].n_zero), (0, 2, 1));
        let flipped = layer_distribution(&s.negated());
        assert_eq!(flipped[0].n_distractor_dominant, 3);
        assert_eq!(flipped[1].n_target_dominant, 2);
    }

    proptest! {
        #[test]
        fn scaling_one_neuron_keeps_its_score(
            vals in proptest::collection::vec(0.0f64..5.0, 4..12),
            c in 0.1f64..10.0,
        ) {
            let n = vals.len();
            let labels: Vec<Label> = (0..n)
                .map(|i| if i % 2 == 0 { Label::Target } else { Label::Distractor })
                .collect();
            let t = tensor(&labels, 1, 1, vals.clone());
            let scaled = tensor(&labels, 1, 1, vals.iter().map(|v| v * c).collect());
            let a = compute_selectivity(&t, DEFAULT_EPS).unwrap();
            let b = compute_selectivity(&scaled, DEFAULT_EPS).unwrap();
            let num = a.mu_target[0] - a.mu_distractor[0];
            let sig = a.sigma[0];
            // Exact when ε = 0; the ε term bounds the drift.
            let bound = (num / sig - num / (sig + DEFAULT_EPS)).abs()
                + (num / sig - c * num / (c * sig + DEFAULT_EPS)).abs()
                + 1e-9 * a.s[0].abs().max(1.0);
            prop_assume!(sig > 1e-3);
            prop_assert!((a.s[0] - b.s[0]).abs() <= bound);
        }
    }
}
