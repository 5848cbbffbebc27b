//! The run configuration shared by the CLI and the sweep.

use std::path::{Path, PathBuf};

use neurosel_core::eval::AnswerFormat;
use neurosel_core::finetune::LoraConfig;
use neurosel_core::generator::{GenerationConfig, LoopParams};
use neurosel_core::pruner::{PruneMode, DEFAULT_GRANULARITY};
use neurosel_core::selectivity::DEFAULT_EPS;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{NsError, Result};
use crate::files::{read_bytes, read_json, sha256_hex};

pub const DEFAULT_SEEDS: [u64; 2] = [42, 33];

pub fn default_ratios() -> Vec<f64> {
    (1..=7).map(|k| (5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    pub ratios: Vec<f64>,
    pub granularity: usize,
    pub modes: Vec<PruneMode>,
    /// Seeds for random mode; one sweep row per seed.
    pub seeds: Vec<u64>,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            ratios: default_ratios(),
            granularity: DEFAULT_GRANULARITY,
            modes: PruneMode::ALL.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// `code` or `math`; ignored when `lora` is given.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    /// Overrides the learning rate of the preset.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// JSONL of `{prompt, completion}` pairs.
    pub data: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Pruning modes whose points are fine-tuned during a sweep.
    #[serde(default = "selective_only")]
    pub modes: Vec<PruneMode>,
}

fn selective_only() -> Vec<PruneMode> {
    vec![PruneMode::Selective]
}

impl FinetuneConfig {
    pub fn resolve(&self) -> Result<LoraConfig> {
        let mut cfg = match (&self.lora, &self.preset) {
            (Some(l), _) => l.clone(),
            (None, Some(name)) => LoraConfig::preset(name)
                .ok_or_else(|| NsError::config("finetune.preset", format!("unknown preset `{name}` (code|math)")))?,
            (None, None) => return Err(NsError::config("finetune", "either `preset` or `lora` is required")),
        };
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        cfg.validate().map_err(|e| NsError::config("finetune", e.to_string()))?;
        Ok(cfg)
    }
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    /// Labeled prompts for activation capture.
    pub capture_prompts: Vec<PathBuf>,
    /// Target-task prompts with gold answers.
    pub eval_prompts: PathBuf,
    /// Distractor-task prompts; outputs are compared with the unpruned model.
    #[serde(default)]
    pub distractor_prompts: Option<PathBuf>,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub loop_params: LoopParams,
    #[serde(default)]
    pub answer_format: AnswerFormat,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl RunConfig {
    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path).map_err(|e| match e {
            NsError::Json { path, source } => NsError::config(path.display().to_string(), source.to_string()),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.model);
        self.capture_prompts.iter_mut().for_each(fix);
        fix(&mut self.eval_prompts);
        if let Some(p) = &mut self.distractor_prompts {
            fix(p);
        }
        if let Some(f) = &mut self.finetune {
            fix(&mut f.data);
        }
        fix(&mut self.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let exists = |field: &str, p: &Path| -> Result<()> {
            if p.is_file() {
                Ok(())
            } else {
                Err(NsError::config(field, format!("{} does not exist", p.display())))
            }
        };
        exists("model", &self.model)?;
        if self.capture_prompts.is_empty() {
            return Err(NsError::config("capture_prompts", "at least one prompt file is required"));
        }
        for (i, p) in self.capture_prompts.iter().enumerate() {
            exists(&format!("capture_prompts[{i}]"), p)?;
        }
        exists("eval_prompts", &self.eval_prompts)?;
        if let Some(p) = &self.distractor_prompts {
            exists("distractor_prompts", p)?;
        }
        let pr = &self.pruning;
        if pr.ratios.is_empty() {
            return Err(NsError::config("pruning.ratios", "empty"));
        }
        for (i, &r) in pr.ratios.iter().enumerate() {
            if !(r > 0.0 && r < 1.0) {
                return Err(NsError::config(format!("pruning.ratios[{i}]"), format!("{r} is not in (0, 1)")));
            }
        }
        if pr.granularity == 0 {
            return Err(NsError::config("pruning.granularity", "must be >= 1"));
        }
        if pr.modes.is_empty() {
            return Err(NsError::config("pruning.modes", "empty"));
        }
        if pr.modes.contains(&PruneMode::Random) && pr.seeds.is_empty() {
            return Err(NsError::config("pruning.seeds", "random mode needs at least one seed"));
        }
        self.generation
            .validate()
            .map_err(|e| NsError::config("generation.max_new_tokens", e.to_string()))?;
        crate::stop::compile_stops(&self.generation)?;
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(NsError::config("eps", "must be > 0"));
        }
        if self.jobs == 0 {
            return Err(NsError::config("jobs", "must be >= 1"));
        }
        if let Some(f) = &self.finetune {
            exists("finetune.data", &f.data)?;
            f.resolve()?;
        }
        Ok(())
    }

    /// Hash of everything that determines sweep results: settings plus the
    /// content of every input file. Output location and job count are
    /// excluded.
    pub fn fingerprint(&self) -> Result<String> {
        let h = |p: &Path| -> Result<String> { Ok(sha256_hex(&read_bytes(p)?)) };
        let capture: Vec<String> = self.capture_prompts.iter().map(|p| h(p)).collect::<Result<_>>()?;
        let finetune = match &self.finetune {
            Some(f) => json!({
                "lora": f.resolve()?,
                "data": h(&f.data)?,
                "seed": f.seed,
                "modes": f.modes,
            }),
            None => serde_json::Value::Null,
        };
        let doc = json!({
            "model": h(&self.model)?,
            "capture_prompts": capture,
            "eval_prompts": h(&self.eval_prompts)?,
            "distractor_prompts": self.distractor_prompts.as_deref().map(h).transpose()?,
            "pruning": self.pruning,
            "generation": self.generation,
            "loop_params": self.loop_params,
            "answer_format": self.answer_format,
            "eps": self.eps,
            "finetune": finetune,
        });
        Ok(sha256_hex(&serde_json::to_vec(&doc).expect("json")))
    }
}

/// Parses `5..35`, `5..35:5`, `5,10,15` or `0.05,0.1`; values above 1 are
/// percentages.
pub fn parse_ratios(s: &str) -> Result<Vec<f64>> {
    let bad = |m: String| NsError::config("--ratios", m);
    let num = |t: &str| -> Result<f64> {
        t.trim()
            .trim_end_matches('%')
            .parse::<f64>()
            .map_err(|_| bad(format!("`{t}` is not a number")))
    };
    let frac = |v: f64| if v > 1.0 { v / 100.0 } else { v };
    if let Some((lo, rest)) = s.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((h, st)) => (num(h)?, num(st)?),
            None => (num(rest)?, 5.0),
        };
        let lo = num(lo)?;
        if step.is_nan() || step <= 0.0 || hi < lo {
            return Err(bad(format!("empty range `{s}`")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|k| frac(lo + step * k as f64)).collect());
    }
    s.split(',').map(|t| num(t).map(frac)).collect()
}

/// Parses a comma-separated list of modes.
pub fn parse_modes(s: &str) -> Result<Vec<PruneMode>> {
    s.split(',')
        .map(|m| m.parse::<PruneMode>().map_err(|e| NsError::config("--modes", e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_syntax() {
        assert_eq!(parse_ratios("5..35").unwrap(), default_ratios());
        assert_eq!(parse_ratios("0.05,0.1").unwrap(), [0.05, 0.1]);
        assert_eq!(parse_ratios("10..30:10").unwrap(), [0.1, 0.2, 0.3]);
        assert_eq!(parse_ratios("15%").unwrap(), [0.15]);
        assert!(parse_ratios("x").is_err());
        assert_eq!(default_ratios()[2], 0.15);
    }

    #[test]
    fn modes() {
        assert_eq!(
            parse_modes("selective,random,reverse").unwrap(),
            [PruneMode::Selective, PruneMode::Random, PruneMode::Reverse]
        );
        assert!(parse_modes("magnitude").is_err());
    }
}
