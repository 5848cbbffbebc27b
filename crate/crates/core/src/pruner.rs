//! Granularity-aware structural pruning of MLP neurons.
//!
//! Every layer loses the same number of neurons,
//! `p = G · ⌈ratio · d_ff / G⌉`, so the surviving width stays a multiple of
//! the granularity `G` whenever `d_ff` is. Neuron `n` of layer `ℓ` owns row
//! `n` of the gate and up projections and column `n` of the down
//! projection; slicing keeps survivors in their original order.
//!
//! Random plans draw layer `ℓ` from `SplitMix64::derive(seed, ℓ)` with a
//! partial Fisher–Yates shuffle (see [`SplitMix64::sample_indices`]).

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::ModelBundle;
use crate::rng::SplitMix64;
use crate::selectivity::SelectivityScores;
use crate::tensor::Real;

pub const DEFAULT_GRANULARITY: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    /// Remove the lowest-scoring neurons.
    Selective,
    /// Remove the highest-scoring neurons.
    Reverse,
    /// Remove a seeded uniform sample.
    Random,
}

impl PruneMode {
    pub const ALL: [PruneMode; 3] = [PruneMode::Selective, PruneMode::Random, PruneMode::Reverse];

    pub fn as_str(self) -> &'static str {
        match self {
            PruneMode::Selective => "selective",
            PruneMode::Reverse => "reverse",
            PruneMode::Random => "random",
        }
    }
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "selective" => Ok(PruneMode::Selective),
            "reverse" => Ok(PruneMode::Reverse),
            "random" => Ok(PruneMode::Random),
            other => Err(Error::InvalidPlan(format!("unknown pruning mode `{other}`"))),
        }
    }
}

/// Per-layer neuron partition plus the request it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub mode: PruneMode,
    pub nominal_ratio: f64,
    pub granularity: usize,
    pub seed: Option<u64>,
    pub d_ff: usize,
    pub prune_count: usize,
    /// Survivors per layer, ascending.
    pub keep: Vec<Vec<usize>>,
    /// Pruned neurons per layer, ascending.
    pub pruned: Vec<Vec<usize>>,
    /// Score boundary per layer: the largest pruned score in selective
    /// mode, the smallest in reverse mode. Absent for random plans and
    /// empty prune sets.
    pub thresholds: Vec<Option<f64>>,
    /// Pruned neurons with a positive score, per layer. Absent when the
    /// plan was built without scores.
    pub positive_pruned: Option<Vec<usize>>,
}

impl PruningPlan {
    pub fn n_layers(&self) -> usize {
        self.keep.len()
    }

    pub fn kept(&self) -> usize {
        self.d_ff - self.prune_count
    }

    /// `p / d_ff`.
    pub fn exact_ratio(&self) -> f64 {
        self.prune_count as f64 / self.d_ff as f64
    }

    /// Exact ratio as a percentage with two decimals, e.g. `"15.54"`.
    pub fn exact_percent(&self) -> alloc::string::String {
        format!("{:.2}", 100.0 * self.exact_ratio())
    }

    /// Checks the partition invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidPlan(m));
        if self.keep.len() != self.pruned.len() {
            return bad(format!(
                "{} survivor lists but {} prune lists",
                self.keep.len(),
                self.pruned.len()
            ));
        }
        if self.prune_count >= self.d_ff {
            return Err(Error::OverPrune {
                prune_count: self.prune_count,
                d_ff: self.d_ff,
            });
        }
        for (l, (k, p)) in self.keep.iter().zip(&self.pruned).enumerate() {
            if p.len() != self.prune_count || k.len() + p.len() != self.d_ff {
                return bad(format!(
                    "layer {l}: {} kept + {} pruned, expected {} + {}",
                    k.len(),
                    p.len(),
                    self.kept(),
                    self.prune_count
                ));
            }
            if !is_strictly_ascending(k) || !is_strictly_ascending(p) {
                return bad(format!("layer {l}: index lists must be strictly ascending"));
            }
            let mut seen = alloc::vec![false; self.d_ff];
            for &i in k.iter().chain(p) {
                if i >= self.d_ff || seen[i] {
                    return bad(format!("layer {l}: index {i} repeated or out of range"));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// Builds a plan from explicit per-layer prune sets, which must all have
    /// the same size.
    pub fn from_pruned_sets(
        d_ff: usize,
        pruned: Vec<Vec<usize>>,
        mode: PruneMode,
        granularity: usize,
    ) -> Result<Self> {
        let p = pruned.first().map_or(0, Vec::len);
        let mut sorted = Vec::with_capacity(pruned.len());
        let mut keep = Vec::with_capacity(pruned.len());
        for mut set in pruned {
            set.sort_unstable();
            keep.push(complement(d_ff, &set));
            sorted.push(set);
        }
        let n_layers = sorted.len();
        let plan = Self {
            mode,
            nominal_ratio: p as f64 / d_ff as f64,
            granularity,
            seed: None,
            d_ff,
            prune_count: p,
            keep,
            pruned: sorted,
            thresholds: alloc::vec![None; n_layers],
            positive_pruned: None,
        };
        plan.validate()?;
        Ok(plan)
    }
}

fn is_strictly_ascending(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn complement(d_ff: usize, sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(d_ff.saturating_sub(sorted.len()));
    let mut it = sorted.iter().peekable();
    for i in 0..d_ff {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Per-layer prune count `G · ⌈ratio · d_ff / G⌉`.
///
/// Quotients within `1e-9` of an integer are taken as that integer, so a
/// ratio that lands exactly on a block boundary (10% of 8960 is 7 blocks of
/// 128) is not pushed up a block by binary rounding of the ratio.
pub fn prune_count(d_ff: usize, nominal_ratio: f64, granularity: usize) -> Result<usize> {
    if !(nominal_ratio > 0.0 && nominal_ratio < 1.0) {
        return Err(Error::InvalidPlan(format!(
            "ratio must lie in (0, 1), got {nominal_ratio}"
        )));
    }
    if granularity == 0 || !d_ff.is_multiple_of(granularity) {
        return Err(Error::Granularity { d_ff, granularity });
    }
    let blocks = nominal_ratio * d_ff as f64 / granularity as f64;
    let nearest = Float::round(blocks);
    let blocks = if (blocks - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        Float::ceil(blocks)
    };
    let p = blocks as usize * granularity;
    if p >= d_ff {
        return Err(Error::OverPrune { prune_count: p, d_ff });
    }
    Ok(p)
}

/// Chooses which neurons to remove in every layer.
///
/// Selective mode removes the `p` lowest scores, reverse mode the `p`
/// highest. Equal scores are broken by neuron index, lower index pruned
/// first. Random mode requires a seed and ignores the score values.
pub fn plan_prune(
    scores: &SelectivityScores,
    nominal_ratio: f64,
    granularity: usize,
    mode: PruneMode,
    seed: Option<u64>,
) -> Result<PruningPlan> {
    scores.validate()?;
    let d_ff = scores.d_ff;
    let p = prune_count(d_ff, nominal_ratio, granularity)?;
    if mode == PruneMode::Random && seed.is_none() {
        return Err(Error::InvalidPlan("random mode requires a seed".into()));
    }
    let mut keep = Vec::with_capacity(scores.n_layers);
    let mut pruned = Vec::with_capacity(scores.n_layers);
    let mut thresholds = Vec::with_capacity(scores.n_layers);
    let mut positive = Vec::with_capacity(scores.n_layers);
    for l in 0..scores.n_layers {
        let s = scores.layer(l);
        let mut set: Vec<usize> = match mode {
            PruneMode::Random => {
                let mut rng = SplitMix64::derive(seed.unwrap_or_default(), l as u64);
                rng.sample_indices(d_ff, p)
            }
            PruneMode::Selective => {
                let mut order: Vec<usize> = (0..d_ff).collect();
                order.sort_by(|&a, &b| cmp_score(s[a], s[b]).then(a.cmp(&b)));
                order.truncate(p);
                order
            }
            PruneMode::Reverse => {
                let mut order: Vec<usize> = (0..d_ff).collect();
                order.sort_by(|&a, &b| cmp_score(s[b], s[a]).then(a.cmp(&b)));
                order.truncate(p);
                order
            }
        };
        set.sort_unstable();
        let theta = match mode {
            PruneMode::Random => None,
            PruneMode::Selective => set.iter().map(|&i| s[i]).reduce(f64::max),
            PruneMode::Reverse => set.iter().map(|&i| s[i]).reduce(f64::min),
        };
        thresholds.push(theta);
        positive.push(set.iter().filter(|&&i| s[i] > 0.0).count());
        keep.push(complement(d_ff, &set));
        pruned.push(set);
    }
    let plan = PruningPlan {
        mode,
        nominal_ratio,
        granularity,
        seed: if mode == PruneMode::Random { seed } else { None },
        d_ff,
        prune_count: p,
        keep,
        pruned,
        thresholds,
        positive_pruned: Some(positive),
    };
    plan.validate()?;
    Ok(plan)
}

fn cmp_score(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Slices every MLP block down to the plan's survivors. All other tensors
/// are copied unchanged.
pub fn apply_prune<T: Real>(model: &ModelBundle<T>, plan: &PruningPlan) -> Result<ModelBundle<T>> {
    plan.validate()?;
    let c = &model.config;
    if plan.d_ff != c.d_ff || plan.n_layers() != c.n_layers {
        return Err(shape_err(
            "apply_prune",
            format!("model L={} d_ff={}", c.n_layers, c.d_ff),
            format!("plan L={} d_ff={}", plan.n_layers(), plan.d_ff),
        ));
    }
    let mut out = model.clone();
    out.config.d_ff = plan.kept();
    for (layer, keep) in out.layers.iter_mut().zip(&plan.keep) {
        layer.mlp_gate = layer.mlp_gate.select_rows(keep);
        layer.mlp_up = layer.mlp_up.select_rows(keep);
        layer.mlp_down = layer.mlp_down.select_cols(keep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig, ZeroMaskHook};
    use alloc::vec;
    use alloc::vec::Vec;

    fn scores(l: usize, s: Vec<f64>) -> SelectivityScores {
        let d_ff = s.len() / l;
        let n = s.len();
        SelectivityScores {
            eps: 1e-6,
            n_layers: l,
            d_ff,
            n_target: 1,
            n_distractor: 1,
            s,
            mu_target: vec![0.0; n],
            mu_distractor: vec![0.0; n],
            sigma: vec![0.0; n],
        }
    }

    fn cfg(l: usize, f: usize) -> ModelConfig {
        ModelConfig {
            n_layers: l,
            d_model: 8,
            d_ff: f,
            n_heads: 2,
            vocab_size: 260,
            norm_eps: 1e-6,
            rope_theta: 10000.0,
            max_seq_len: 32,
            bos_id: 1,
            eos_id: 2,
            pad_id: 0,
        }
    }

    #[test]
    fn ceiling_rule_matches_published_ratios() {
        let cases = [
            (18944, [5.41, 10.14, 15.54, 20.27, 25.00, 30.41, 35.14]),
            (8960, [5.71, 10.00, 15.71, 20.00, 25.71, 30.00, 35.71]),
        ];
        for (d_ff, want) in cases {
            for (i, w) in want.iter().enumerate() {
                let ratio = 0.05 * (i + 1) as f64;
                let p = prune_count(d_ff, ratio, 128).unwrap();
                assert_eq!(p % 128, 0);
                assert_eq!(format!("{:.2}", 100.0 * p as f64 / d_ff as f64), format!("{w:.2}"));
            }
        }
        assert_eq!(prune_count(18944, 0.05, 128).unwrap(), 1024);
        assert_eq!(prune_count(8960, 0.35, 128).unwrap(), 3200);
        assert_eq!(prune_count(8960, 0.10, 128).unwrap(), 896);
    }

    #[test]
    fn guards() {
        assert!(matches!(prune_count(256, 0.999, 128), Err(Error::OverPrune { .. })));
        assert!(matches!(prune_count(200, 0.1, 128), Err(Error::Granularity { .. })));
        assert!(matches!(prune_count(256, 0.0, 128), Err(Error::InvalidPlan(_))));
        assert!(matches!(prune_count(256, 1.0, 128), Err(Error::InvalidPlan(_))));
        let sc = scores(1, vec![0.0; 8]);
        assert!(plan_prune(&sc, 0.25, 1, PruneMode::Random, None).is_err());
    }

    #[test]
    fn selective_and_reverse_pick_extremes_with_index_ties() {
        let sc = scores(1, vec![0.5, -1.0, 0.5, 2.0, -1.0, 0.0]);
        let sel = plan_prune(&sc, 0.5, 1, PruneMode::Selective, None).unwrap();
        assert_eq!(sel.pruned[0], [1, 4, 5]);
        assert_eq!(sel.keep[0], [0, 2, 3]);
        assert_eq!(sel.thresholds[0], Some(0.0));
        assert_eq!(sel.positive_pruned.as_deref(), Some(&[0][..]));
        let rev = plan_prune(&sc, 0.5, 1, PruneMode::Reverse, None).unwrap();
        assert_eq!(rev.pruned[0], [0, 2, 3]);
        assert_eq!(rev.positive_pruned.as_deref(), Some(&[3][..]));
        let sel = plan_prune(&sc, 0.3, 1, PruneMode::Selective, None).unwrap();
        // 0.3·6 = 1.8 → 2 neurons; the tie at -1.0 prunes index 1 before 4.
        assert_eq!(sel.pruned[0], [1, 4]);
        let sel = plan_prune(&sc, 0.1, 1, PruneMode::Selective, None).unwrap();
        assert_eq!(sel.pruned[0], [1]);
    }

    #[test]
    fn selective_order_is_lexicographic() {
        let mut rng = SplitMix64::new(9);
        for _ in 0..20 {
            let s: Vec<f64> = (0..2 * 64).map(|_| (rng.below(7) as f64) - 3.0).collect();
            let sc = scores(2, s);
            let plan = plan_prune(&sc, 0.3, 16, PruneMode::Selective, None).unwrap();
            for l in 0..2 {
                let ls = sc.layer(l);
                let worst_pruned = plan.pruned[l].iter().map(|&i| (ls[i], i)).fold(None, |m, x| {
                    Some(match m {
                        Some(m) if cmp_pair(m, x) == Ordering::Greater => m,
                        _ => x,
                    })
                });
                for &k in &plan.keep[l] {
                    assert_eq!(cmp_pair(worst_pruned.unwrap(), (ls[k], k)), Ordering::Less);
                }
            }
        }
    }

    fn cmp_pair(a: (f64, usize), b: (f64, usize)) -> Ordering {
        cmp_score(a.0, b.0).then(a.1.cmp(&b.1))
    }

    #[test]
    fn random_is_seeded() {
        let sc = scores(2, vec![0.0; 512]);
        let a = plan_prune(&sc, 0.25, 64, PruneMode::Random, Some(42)).unwrap();
        let b = plan_prune(&sc, 0.25, 64, PruneMode::Random, Some(42)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pruned[0], a.pruned[1]);
        for s in 0..10u64 {
            let x = plan_prune(&sc, 0.25, 64, PruneMode::Random, Some(2 * s)).unwrap();
            let y = plan_prune(&sc, 0.25, 64, PruneMode::Random, Some(2 * s + 1)).unwrap();
            assert_ne!(x.pruned, y.pruned);
        }
    }

    #[test]
    fn slicing_bookkeeping() {
        let m = ModelBundle::<f32>::random(cfg(1, 4), 3, 1.0).unwrap();
        let plan = PruningPlan::from_pruned_sets(4, vec![vec![2]], PruneMode::Selective, 1).unwrap();
        let p = apply_prune(&m, &plan).unwrap();
        assert_eq!(p.config.d_ff, 3);
        assert_eq!(p.layers[0].mlp_gate.shape(), (3, 8));
        assert_eq!(p.layers[0].mlp_down.shape(), (8, 3));
        assert_eq!(p.layers[0].mlp_up.row(2), m.layers[0].mlp_up.row(3));
        assert_eq!(p.layers[0].mlp_down.get(5, 1), m.layers[0].mlp_down.get(5, 1));
        assert_eq!(p.layers[0].mlp_down.get(5, 2), m.layers[0].mlp_down.get(5, 3));
        assert_eq!(p.layers[0].attn_q, m.layers[0].attn_q);
        assert_eq!(p.embed, m.embed);
        p.validate().unwrap();
        assert_eq!(m.param_count() - p.param_count(), 3 * 8);

        let none = PruningPlan::from_pruned_sets(4, vec![vec![]], PruneMode::Selective, 1).unwrap();
        assert_eq!(apply_prune(&m, &none).unwrap(), m);
    }

    #[test]
    fn zero_masking_equivalence() {
        let mut rng = SplitMix64::new(21);
        for trial in 0..8 {
            let l = 1 + rng.below(3) as usize;
            let f = 16 * (1 + rng.below(4) as usize);
            let m = ModelBundle::<f32>::random(cfg(l, f), trial, 1.0).unwrap();
            let sc = scores(l, (0..l * f).map(|_| rng.next_f64() - 0.5).collect());
            let mode = [PruneMode::Selective, PruneMode::Reverse, PruneMode::Random][trial as usize % 3];
            let plan = plan_prune(&sc, 0.3, 8, mode, Some(trial)).unwrap();
            let pruned = apply_prune(&m, &plan).unwrap();
            let toks: Vec<u32> = (0..7).map(|_| 3 + rng.below(256) as u32).collect();
            let mask = vec![1u8; toks.len()];
            let mut hook = ZeroMaskHook::new(&plan.pruned);
            let a = forward(&m, &toks, &mask, Some(&mut hook)).unwrap();
            let b = forward(&pruned, &toks, &mask, None).unwrap();
            let bits = |x: &crate::Matrix<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
            assert_eq!(
                m.param_count() - pruned.param_count(),
                (3 * 8 * plan.prune_count * l) as u64
            );
        }
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let m = ModelBundle::<f32>::random(cfg(1, 8), 3, 1.0).unwrap();
        let plan = PruningPlan::from_pruned_sets(4, vec![vec![2]], PruneMode::Selective, 1).unwrap();
        assert!(matches!(apply_prune(&m, &plan), Err(Error::Shape { .. })));
    }
}
