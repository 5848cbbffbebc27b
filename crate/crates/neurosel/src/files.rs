//! Reading and writing every artifact the pipeline produces.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use neurosel_core::capture::{ActivationTensor, Label, Prompt, PromptSet};
use neurosel_core::eval::Transcript;
use neurosel_core::finetune::{AdapterFactors, Example, LoraAdapter};
use neurosel_core::model::{ModelBundle, ModelConfig, Proj};
use neurosel_core::pruner::{PruneMode, PruningPlan};
use neurosel_core::selectivity::SelectivityScores;
use neurosel_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{decode, encode, read_tensor, PayloadBuilder, TensorEntry};
use crate::error::{FormatError, NsError, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"NSCM";
pub const ACTS_MAGIC: &[u8; 4] = b"NSAC";
pub const ADAPTER_MAGIC: &[u8; 4] = b"NSLA";
pub const VERSION: u16 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| NsError::io(path, e))
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| NsError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| NsError::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| NsError::io(path, e))
}

fn check_version(path: &Path, magic: &'static str, version: u16) -> Result<()> {
    if version != VERSION {
        return Err(NsError::format(path, FormatError::Version { magic, version }));
    }
    Ok(())
}

// Model weights

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn is_vector(name: &str) -> bool {
    name == "final_norm" || name.contains(".norm.")
}

fn file_shape(name: &str, (r, c): (usize, usize)) -> Vec<usize> {
    if is_vector(name) {
        vec![c]
    } else {
        vec![r, c]
    }
}

pub fn model_to_bytes(model: &ModelBundle<f32>) -> Vec<u8> {
    let mut p = PayloadBuilder::default();
    for t in model.tensors() {
        let shape = file_shape(&t.name, t.shape);
        p.push(t.name, &shape, t.data);
    }
    let header = ModelHeader {
        config: model.config.clone(),
        tensors: p.entries,
    };
    encode(MODEL_MAGIC, VERSION, &header, &p.bytes)
}

pub fn model_from_bytes(path: &Path, bytes: &[u8]) -> Result<ModelBundle<f32>> {
    let (version, header, payload): (u16, ModelHeader, _) =
        decode(MODEL_MAGIC, bytes).map_err(|e| NsError::format(path, e))?;
    check_version(path, "NSCM", version)?;
    let index: HashMap<&str, &TensorEntry> = header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let expected = header.config.tensor_names();
    if header.tensors.len() != expected.len() {
        return Err(NsError::format(
            path,
            FormatError::Manifest(format!(
                "{} tensors listed, config implies {}",
                header.tensors.len(),
                expected.len()
            )),
        ));
    }
    let mut fmt_err = None;
    let built = ModelBundle::from_named(header.config.clone(), |name, shape| {
        let res = match index.get(name) {
            Some(entry) => read_tensor::<f32>(payload, entry, &file_shape(name, shape)),
            None => Err(FormatError::Manifest(format!("missing tensor {name}"))),
        };
        res.map_err(|e| {
            fmt_err = Some(e);
            neurosel_core::Error::InvalidConfig(format!("tensor {name}"))
        })
    });
    match (built, fmt_err) {
        (_, Some(e)) => Err(NsError::format(path, e)),
        (r, None) => Ok(r?),
    }
}

pub fn save_model(model: &ModelBundle<f32>, path: &Path) -> Result<String> {
    let bytes = model_to_bytes(model);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a model and returns it with the content hash of its file.
pub fn load_model(path: &Path) -> Result<(ModelBundle<f32>, String)> {
    let bytes = read_bytes(path)?;
    Ok((model_from_bytes(path, &bytes)?, sha256_hex(&bytes)))
}

// Activations

#[derive(Debug, Serialize, Deserialize)]
struct ActsHeader {
    n_prompts: usize,
    n_layers: usize,
    d_ff: usize,
    labels: Vec<Label>,
    source_model_hash: String,
    tensors: Vec<TensorEntry>,
}

pub fn activations_to_bytes(acts: &ActivationTensor) -> Vec<u8> {
    let mut p = PayloadBuilder::default();
    p.push("activations", &[acts.n_prompts, acts.n_layers, acts.d_ff], &acts.data);
    let header = ActsHeader {
        n_prompts: acts.n_prompts,
        n_layers: acts.n_layers,
        d_ff: acts.d_ff,
        labels: acts.labels.clone(),
        source_model_hash: acts.source_model_hash.clone(),
        tensors: p.entries,
    };
    encode(ACTS_MAGIC, VERSION, &header, &p.bytes)
}

pub fn activations_from_bytes(path: &Path, bytes: &[u8]) -> Result<ActivationTensor> {
    let (version, h, payload): (u16, ActsHeader, _) =
        decode(ACTS_MAGIC, bytes).map_err(|e| NsError::format(path, e))?;
    check_version(path, "NSAC", version)?;
    let entry = h
        .tensors
        .first()
        .ok_or_else(|| NsError::format(path, FormatError::Manifest("no activation tensor".into())))?;
    let data = read_tensor::<f64>(payload, entry, &[h.n_prompts, h.n_layers, h.d_ff])
        .map_err(|e| NsError::format(path, e))?;
    if h.labels.len() != h.n_prompts {
        return Err(NsError::format(
            path,
            FormatError::Manifest(format!("{} labels for {} prompts", h.labels.len(), h.n_prompts)),
        ));
    }
    Ok(ActivationTensor::new(h.n_layers, h.d_ff, h.labels, data, h.source_model_hash)?)
}

pub fn save_activations(acts: &ActivationTensor, path: &Path) -> Result<String> {
    let bytes = activations_to_bytes(acts);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_activations(path: &Path) -> Result<ActivationTensor> {
    activations_from_bytes(path, &read_bytes(path)?)
}

// Adapters

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    rank: usize,
    alpha: f64,
    n_layers: usize,
    targets: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn adapter_to_bytes(adapter: &LoraAdapter<f32>) -> Vec<u8> {
    let mut p = PayloadBuilder::default();
    let mut targets = Vec::new();
    for f in &adapter.factors {
        let name = f.proj.tensor_name(f.layer);
        p.push(format!("{name}.lora_a"), &[f.a.rows(), f.a.cols()], f.a.data());
        p.push(format!("{name}.lora_b"), &[f.b.rows(), f.b.cols()], f.b.data());
        targets.push(name);
    }
    let header = AdapterHeader {
        rank: adapter.rank,
        alpha: adapter.alpha,
        n_layers: adapter.n_layers(),
        targets,
        tensors: p.entries,
    };
    encode(ADAPTER_MAGIC, VERSION, &header, &p.bytes)
}

fn parse_target(name: &str) -> Option<(usize, Proj)> {
    let rest = name.strip_prefix("layers.")?;
    let (layer, _) = rest.split_once('.')?;
    let layer = layer.parse().ok()?;
    Proj::ALL.into_iter().find(|p| p.tensor_name(layer) == name).map(|p| (layer, p))
}

pub fn adapter_from_bytes(path: &Path, bytes: &[u8]) -> Result<LoraAdapter<f32>> {
    let (version, h, payload): (u16, AdapterHeader, _) =
        decode(ADAPTER_MAGIC, bytes).map_err(|e| NsError::format(path, e))?;
    check_version(path, "NSLA", version)?;
    let fe = |m: String| NsError::format(path, FormatError::Manifest(m));
    let index: HashMap<&str, &TensorEntry> = h.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut factors = Vec::new();
    for target in &h.targets {
        let (layer, proj) = parse_target(target).ok_or_else(|| fe(format!("unknown target {target}")))?;
        let get = |suffix: &str| -> Result<Matrix<f32>> {
            let name = format!("{target}.{suffix}");
            let e = index.get(name.as_str()).ok_or_else(|| fe(format!("missing tensor {name}")))?;
            if e.shape.len() != 2 {
                return Err(fe(format!("{name}: shape {:?} is not 2-D", e.shape)));
            }
            let data = read_tensor::<f32>(payload, e, &e.shape).map_err(|err| NsError::format(path, err))?;
            Ok(Matrix::from_vec(e.shape[0], e.shape[1], data)?)
        };
        let a = get("lora_a")?;
        let b = get("lora_b")?;
        factors.push(AdapterFactors { layer, proj, a, b });
    }
    Ok(LoraAdapter::new(h.rank, h.alpha, h.n_layers, factors)?)
}

pub fn save_adapter(adapter: &LoraAdapter<f32>, path: &Path) -> Result<String> {
    let bytes = adapter_to_bytes(adapter);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter<f32>> {
    adapter_from_bytes(path, &read_bytes(path)?)
}

// JSON documents

/// Writes floats with 17 significant digits, which round-trips every f64.
#[derive(Debug, Default, Clone, Copy)]
pub struct Exact17;

impl serde_json::ser::Formatter for Exact17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        write!(w, "{:.16e}", v as f64)
    }
}

pub fn to_json_exact<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Exact17);
    value.serialize(&mut ser).expect("in-memory serialization");
    out.push(b'\n');
    out
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory serialization");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<String> {
    let bytes = to_json_pretty(value);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| NsError::json(path, e))
}

pub fn jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("in-memory serialization");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<String> {
    let bytes = jsonl_bytes(items);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_bytes(path)?;
    serde_json::Deserializer::from_slice(&bytes)
        .into_iter()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| NsError::json(path, e))
}

// Scores

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    #[serde(rename = "S")]
    pub s: Vec<f64>,
    pub mu_target: Vec<f64>,
    pub mu_distractor: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub eps: f64,
    #[serde(rename = "L")]
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_target: usize,
    pub n_distractor: usize,
    pub layers: Vec<LayerScores>,
}

impl From<&SelectivityScores> for ScoresFile {
    fn from(s: &SelectivityScores) -> Self {
        let d = s.d_ff;
        let cut = |v: &[f64], l: usize| v[l * d..(l + 1) * d].to_vec();
        Self {
            eps: s.eps,
            n_layers: s.n_layers,
            d_ff: d,
            n_target: s.n_target,
            n_distractor: s.n_distractor,
            layers: (0..s.n_layers)
                .map(|l| LayerScores {
                    s: cut(&s.s, l),
                    mu_target: cut(&s.mu_target, l),
                    mu_distractor: cut(&s.mu_distractor, l),
                    sigma: cut(&s.sigma, l),
                })
                .collect(),
        }
    }
}

impl ScoresFile {
    pub fn into_scores(self) -> neurosel_core::Result<SelectivityScores> {
        let flat = |f: fn(&LayerScores) -> &Vec<f64>| -> Vec<f64> { self.layers.iter().flat_map(|l| f(l).clone()).collect() };
        let s = SelectivityScores {
            eps: self.eps,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            n_target: self.n_target,
            n_distractor: self.n_distractor,
            s: flat(|l| &l.s),
            mu_target: flat(|l| &l.mu_target),
            mu_distractor: flat(|l| &l.mu_distractor),
            sigma: flat(|l| &l.sigma),
        };
        s.validate()?;
        Ok(s)
    }
}

pub fn scores_to_bytes(scores: &SelectivityScores) -> Vec<u8> {
    to_json_exact(&ScoresFile::from(scores))
}

pub fn save_scores(scores: &SelectivityScores, path: &Path) -> Result<String> {
    let bytes = scores_to_bytes(scores);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_scores(path: &Path) -> Result<SelectivityScores> {
    Ok(read_json::<ScoresFile>(path)?.into_scores()?)
}

// Plans

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactRatio {
    pub numerator: usize,
    pub denominator: usize,
    pub decimal: f64,
    pub percent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub mode: PruneMode,
    pub nominal_ratio: f64,
    pub exact_ratio: ExactRatio,
    pub granularity: usize,
    pub seed: Option<u64>,
    pub d_ff: usize,
    pub prune_count: usize,
    pub keep: Vec<Vec<usize>>,
    pub pruned: Vec<Vec<usize>>,
    pub thresholds: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_pruned: Option<Vec<usize>>,
}

impl From<&PruningPlan> for PlanFile {
    fn from(p: &PruningPlan) -> Self {
        Self {
            mode: p.mode,
            nominal_ratio: p.nominal_ratio,
            exact_ratio: ExactRatio {
                numerator: p.prune_count,
                denominator: p.d_ff,
                decimal: p.exact_ratio(),
                percent: p.exact_percent(),
            },
            granularity: p.granularity,
            seed: p.seed,
            d_ff: p.d_ff,
            prune_count: p.prune_count,
            keep: p.keep.clone(),
            pruned: p.pruned.clone(),
            thresholds: p.thresholds.clone(),
            positive_pruned: p.positive_pruned.clone(),
        }
    }
}

impl PlanFile {
    pub fn into_plan(self) -> neurosel_core::Result<PruningPlan> {
        let plan = PruningPlan {
            mode: self.mode,
            nominal_ratio: self.nominal_ratio,
            granularity: self.granularity,
            seed: self.seed,
            d_ff: self.d_ff,
            prune_count: self.prune_count,
            keep: self.keep,
            pruned: self.pruned,
            thresholds: self.thresholds,
            positive_pruned: self.positive_pruned,
        };
        plan.validate()?;
        Ok(plan)
    }
}

pub fn save_plan(plan: &PruningPlan, path: &Path) -> Result<String> {
    write_json(&PlanFile::from(plan), path)
}

pub fn load_plan(path: &Path) -> Result<PruningPlan> {
    Ok(read_json::<PlanFile>(path)?.into_plan()?)
}

// Prompts, examples and transcripts

pub fn load_prompts(path: &Path) -> Result<PromptSet> {
    let set = PromptSet::new(read_jsonl::<Prompt>(path)?);
    if set.is_empty() {
        return Err(NsError::config(path.display().to_string(), "prompt file is empty"));
    }
    Ok(set)
}

/// Loads and concatenates several prompt files.
pub fn load_prompt_files(paths: &[impl AsRef<Path>]) -> Result<PromptSet> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(load_prompts(p.as_ref())?.prompts);
    }
    Ok(PromptSet::new(all))
}

pub fn save_prompts(set: &PromptSet, path: &Path) -> Result<String> {
    write_jsonl(&set.prompts, path)
}

pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    read_jsonl(path)
}

pub fn load_transcripts(path: &Path) -> Result<Vec<Transcript>> {
    read_jsonl(path)
}
