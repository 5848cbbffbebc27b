//! The end-to-end sweep: capture, score, then plan, prune, generate and
//! evaluate every (mode, ratio, seed) point, optionally fine-tune, and
//! summarize.
//!
//! Every stage records its artifacts and their SHA-256 in
//! `sweep.manifest.json`. A rerun skips stages whose artifacts are present
//! with matching hashes, so an interrupted sweep resumes where it stopped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use neurosel_core::capture::PromptSet;
use neurosel_core::eval::{
    delta_selective_random, distractor_similarity, relative_accuracy_loss, relative_gain, EvalReport, EvalSettings,
    PlanSummary, Tally, Transcript,
};
use neurosel_core::finetune::{train_lora, Example, LoraConfig};
use neurosel_core::model::ModelBundle;
use neurosel_core::pruner::{apply_prune, plan_prune, PruneMode};
use neurosel_core::selectivity::{compute_selectivity, SelectivityScores};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{NsError, Result};
use crate::files::{
    jsonl_bytes, load_examples, load_prompt_files, load_prompts, load_scores, load_transcripts, load_model, read_bytes,
    read_json, save_activations, save_adapter, save_plan, save_scores, sha256_hex, to_json_pretty, write_bytes,
    write_json,
};
use crate::pipeline::{capture, evaluate, output_similarity};
use crate::report::{ReportFile, TOOLCHAIN};
use crate::summary::{accuracy_chart, to_csv, trap_chart, SummaryRow};

pub const MANIFEST: &str = "sweep.manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Stage {
    /// Artifact paths relative to the output directory.
    pub artifacts: BTreeMap<String, Artifact>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub toolchain: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, Stage>,
}

impl Manifest {
    fn fresh(config_hash: String) -> Self {
        Self {
            toolchain: TOOLCHAIN.into(),
            config_hash,
            stages: BTreeMap::new(),
        }
    }
}

/// A finished sweep point as stored in `point.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub id: String,
    pub report: EvalReport,
    pub d_ff_kept: usize,
    pub positive_pruned: Option<usize>,
    pub distractor_accuracy: Option<f64>,
    pub finetune: Option<FinetuneRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub config: LoraConfig,
    pub seed: u64,
    pub accuracy: f64,
    pub trap_rate_total: f64,
    pub relative_gain: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Top-level `report.json` of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub baseline: ReportFile,
    pub baseline_distractor_accuracy: Option<f64>,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PointKey {
    pub mode: PruneMode,
    pub ratio_bits: u64,
    pub seed: Option<u64>,
}

impl PointKey {
    pub fn ratio(&self) -> f64 {
        f64::from_bits(self.ratio_bits)
    }

    pub fn id(&self) -> String {
        let pct = format!("{:.2}", self.ratio() * 100.0);
        let pct = pct.trim_end_matches('0').trim_end_matches('.');
        match self.seed {
            Some(s) => format!("{}-{pct}-s{s}", self.mode.as_str()),
            None => format!("{}-{pct}", self.mode.as_str()),
        }
    }
}

/// Sweep points in output order: mode-major, then ratio, then seed.
pub fn points(cfg: &RunConfig) -> Vec<PointKey> {
    let mut out = Vec::new();
    for &mode in &cfg.pruning.modes {
        let seeds: Vec<Option<u64>> = if mode == PruneMode::Random {
            cfg.pruning.seeds.iter().map(|&s| Some(s)).collect()
        } else {
            vec![None]
        };
        for seed in seeds {
            for &r in &cfg.pruning.ratios {
                out.push(PointKey {
                    mode,
                    ratio_bits: r.to_bits(),
                    seed,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<SummaryRow>,
    pub manifest: Manifest,
    /// Stages skipped because their artifacts were already complete.
    pub resumed: Vec<String>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    manifest: Mutex<Manifest>,
    resumed: Mutex<Vec<String>>,
}

impl Ctx<'_> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn is_done(&self, stage: &str) -> bool {
        let m = self.manifest.lock().expect("manifest lock");
        let Some(st) = m.stages.get(stage) else { return false };
        let ok = st.artifacts.iter().all(|(rel, a)| {
            read_bytes(&self.out.join(rel)).is_ok_and(|b| sha256_hex(&b) == a.sha256 && b.len() as u64 == a.bytes)
        });
        if ok {
            self.resumed.lock().expect("resumed lock").push(stage.to_string());
        }
        ok
    }

    fn write(&self, stage: &mut Stage, path: &Path, bytes: &[u8]) -> Result<()> {
        write_bytes(path, bytes)?;
        stage.artifacts.insert(
            self.rel(path),
            Artifact {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    fn record(&self, stage: &mut Stage, path: &Path, sha: String) -> Result<()> {
        let len = std::fs::metadata(path).map_err(|e| NsError::io(path, e))?.len();
        stage.artifacts.insert(self.rel(path), Artifact { sha256: sha, bytes: len });
        Ok(())
    }

    fn commit(&self, name: &str, stage: Stage) -> Result<()> {
        let mut m = self.manifest.lock().expect("manifest lock");
        m.stages.insert(name.to_string(), stage);
        write_bytes(&self.out.join(MANIFEST), &to_json_pretty(&*m))
    }
}

struct Inputs {
    model: ModelBundle<f32>,
    model_hash: String,
    eval: PromptSet,
    distractor: Option<PromptSet>,
    settings: EvalSettings,
    train: Option<(LoraConfig, Vec<Example>)>,
}

/// Runs (or resumes) the sweep described by `cfg`.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| NsError::io(out, e))?;
    let config_hash = cfg.fingerprint()?;
    let manifest = match read_json::<Manifest>(&out.join(MANIFEST)) {
        Ok(m) if m.config_hash == config_hash && m.toolchain == TOOLCHAIN => m,
        _ => Manifest::fresh(config_hash.clone()),
    };
    let ctx = Ctx {
        cfg,
        out,
        manifest: Mutex::new(manifest),
        resumed: Mutex::new(Vec::new()),
    };
    write_bytes(
        &out.join(MANIFEST),
        &to_json_pretty(&*ctx.manifest.lock().expect("manifest lock")),
    )?;

    let (model, model_hash) = load_model(&cfg.model)?;
    let inputs = Inputs {
        model,
        model_hash,
        eval: load_prompts(&cfg.eval_prompts)?,
        distractor: cfg.distractor_prompts.as_deref().map(load_prompts).transpose()?,
        settings: EvalSettings {
            generation: cfg.generation.clone(),
            loop_params: cfg.loop_params,
            answer_format: cfg.answer_format,
        },
        train: match &cfg.finetune {
            Some(f) => Some((f.resolve()?, load_examples(&f.data)?)),
            None => None,
        },
    };

    let scores = stage_scores(&ctx, &inputs)?;
    let (base, base_dis) = stage_baseline(&ctx, &inputs, &config_hash)?;

    let keys = points(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| NsError::config("jobs", e.to_string()))?;
    let inner = inner_threads(cfg.jobs);
    let records: Vec<PointRecord> = pool.install(|| {
        keys.par_iter()
            .map(|k| {
                let p = rayon::ThreadPoolBuilder::new()
                    .num_threads(inner)
                    .build()
                    .map_err(|e| NsError::config("NS_THREADS", e.to_string()))?;
                p.install(|| stage_point(&ctx, &inputs, &scores, &base, &base_dis, k))
            })
            .collect::<Result<_>>()
    })?;

    let rows = summarize(&keys, &records, &base.report);
    stage_summary(&ctx, &rows, &base, &base_dis)?;
    let manifest = ctx.manifest.into_inner().expect("manifest lock");
    let mut resumed = ctx.resumed.into_inner().expect("resumed lock");
    resumed.sort();
    Ok(SweepOutcome {
        out_dir: out.to_path_buf(),
        rows,
        manifest,
        resumed,
    })
}

/// Threads available to each concurrently running point.
fn inner_threads(jobs: usize) -> usize {
    let cap = std::env::var("NS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    (cap / jobs.max(1)).max(1)
}

fn stage_scores(ctx: &Ctx<'_>, inp: &Inputs) -> Result<SelectivityScores> {
    let acts_path = ctx.out.join("activations.nsac");
    let scores_path = ctx.out.join("scores.json");
    if !ctx.is_done("capture") {
        let prompts = load_prompt_files(&ctx.cfg.capture_prompts)?;
        let acts = capture(&inp.model, &prompts, &inp.model_hash)?;
        let mut st = Stage::default();
        let sha = save_activations(&acts, &acts_path)?;
        ctx.record(&mut st, &acts_path, sha)?;
        ctx.commit("capture", st)?;
    }
    if !ctx.is_done("score") {
        let acts = crate::files::load_activations(&acts_path)?;
        let scores = compute_selectivity(&acts, ctx.cfg.eps)?;
        let mut st = Stage::default();
        let sha = save_scores(&scores, &scores_path)?;
        ctx.record(&mut st, &scores_path, sha)?;
        ctx.commit("score", st)?;
    }
    load_scores(&scores_path)
}

fn stage_baseline(
    ctx: &Ctx<'_>,
    inp: &Inputs,
    config_hash: &str,
) -> Result<(ReportFile, Option<Vec<Transcript>>)> {
    let dir = ctx.out.join("baseline");
    let report_path = dir.join("report.json");
    let dis_path = dir.join("distractor.jsonl");
    if !ctx.is_done("baseline") {
        let ts = evaluate(&inp.model, None, &inp.eval, &inp.settings)?;
        let mut st = Stage::default();
        ctx.write(&mut st, &dir.join("target.jsonl"), &jsonl_bytes(&ts))?;
        if let Some(d) = &inp.distractor {
            let dts = evaluate(&inp.model, None, d, &inp.settings)?;
            ctx.write(&mut st, &dis_path, &jsonl_bytes(&dts))?;
        }
        let report = EvalReport::new(&inp.model, &Tally::from_transcripts(&ts), inp.settings.loop_params);
        let file = ReportFile::new(report, inp.model_hash.clone(), Some(config_hash.to_string()));
        ctx.write(&mut st, &report_path, &to_json_pretty(&file))?;
        ctx.commit("baseline", st)?;
    }
    let report: ReportFile = read_json(&report_path)?;
    let dis = if inp.distractor.is_some() {
        Some(load_transcripts(&dis_path)?)
    } else {
        None
    };
    Ok((report, dis))
}

fn gold_accuracy(ts: &[Transcript], prompts: &PromptSet) -> Option<f64> {
    prompts
        .prompts
        .iter()
        .all(|p| p.gold.is_some())
        .then(|| Tally::from_transcripts(ts).accuracy())
}

fn stage_point(
    ctx: &Ctx<'_>,
    inp: &Inputs,
    scores: &SelectivityScores,
    base: &ReportFile,
    base_dis: &Option<Vec<Transcript>>,
    key: &PointKey,
) -> Result<PointRecord> {
    let id = key.id();
    let stage_name = format!("points/{id}");
    let dir = ctx.out.join("points").join(&id);
    let record_path = dir.join("point.json");
    if ctx.is_done(&stage_name) {
        return read_json(&record_path);
    }
    let cfg = ctx.cfg;
    let mut st = Stage::default();
    let plan = plan_prune(scores, key.ratio(), cfg.pruning.granularity, key.mode, key.seed)?;
    let plan_path = dir.join("plan.json");
    let sha = save_plan(&plan, &plan_path)?;
    ctx.record(&mut st, &plan_path, sha)?;
    let pruned = apply_prune(&inp.model, &plan)?;

    let ts = evaluate(&pruned, None, &inp.eval, &inp.settings)?;
    ctx.write(&mut st, &dir.join("target.jsonl"), &jsonl_bytes(&ts))?;
    let tally = Tally::from_transcripts(&ts);
    let mut report = EvalReport::new(&pruned, &tally, inp.settings.loop_params);
    report.plan = Some(PlanSummary::from(&plan));
    report.relative_accuracy_loss = relative_accuracy_loss(100.0 * base.report.accuracy, 100.0 * report.accuracy).ok();

    let mut distractor_accuracy = None;
    if let (Some(d), Some(bd)) = (&inp.distractor, base_dis) {
        let dts = evaluate(&pruned, None, d, &inp.settings)?;
        ctx.write(&mut st, &dir.join("distractor.jsonl"), &jsonl_bytes(&dts))?;
        let sim = output_similarity(&dts, bd);
        report.distractor_similarity = distractor_similarity(sim, sim).ok();
        distractor_accuracy = gold_accuracy(&dts, d);
    }

    let mut finetune = None;
    if let (Some((lora, data)), Some(fcfg)) = (&inp.train, &cfg.finetune) {
        if fcfg.modes.contains(&key.mode) {
            let outcome = train_lora(&pruned, data, lora, fcfg.seed)?;
            let adapter_path = dir.join("adapter.nsla");
            let sha = save_adapter(&outcome.adapter, &adapter_path)?;
            ctx.record(&mut st, &adapter_path, sha)?;
            let fts = evaluate(&pruned, Some(&outcome.adapter), &inp.eval, &inp.settings)?;
            ctx.write(&mut st, &dir.join("finetuned.jsonl"), &jsonl_bytes(&fts))?;
            let ft = Tally::from_transcripts(&fts);
            let gain = relative_gain(100.0 * tally.accuracy(), 100.0 * ft.accuracy()).ok();
            report.relative_gain = gain;
            finetune = Some(FinetuneRecord {
                config: lora.clone(),
                seed: fcfg.seed,
                accuracy: ft.accuracy(),
                trap_rate_total: ft.trap_rate(),
                relative_gain: gain,
                epoch_losses: outcome.epoch_losses,
            });
        }
    }

    let record = PointRecord {
        id,
        report,
        d_ff_kept: pruned.config.d_ff,
        positive_pruned: plan.positive_pruned.as_ref().map(|v| v.iter().sum()),
        distractor_accuracy,
        finetune,
    };
    ctx.write(&mut st, &record_path, &to_json_pretty(&record))?;
    ctx.commit(&stage_name, st)?;
    Ok(record)
}

/// Table rows with the cross-point metrics (ΔA against the mean random
/// accuracy at the same ratio) filled in.
pub fn summarize(keys: &[PointKey], records: &[PointRecord], baseline: &EvalReport) -> Vec<SummaryRow> {
    let mut random: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (k, r) in keys.iter().zip(records) {
        if k.mode == PruneMode::Random {
            random.entry(k.ratio_bits).or_default().push(r.report.accuracy);
        }
    }
    keys.iter()
        .zip(records)
        .map(|(k, r)| {
            let rep = &r.report;
            let plan = rep.plan.as_ref();
            let delta = match k.mode {
                PruneMode::Selective => random
                    .get(&k.ratio_bits)
                    .map(|v| delta_selective_random(rep.accuracy, v.iter().sum::<f64>() / v.len() as f64)),
                _ => None,
            };
            SummaryRow {
                mode: k.mode,
                seed: k.seed,
                nominal_ratio: k.ratio(),
                prune_count: plan.map_or(0, |p| p.prune_count),
                exact_ratio_percent: plan.map_or_else(String::new, |p| format!("{:.2}", 100.0 * p.exact_ratio)),
                d_ff_kept: r.d_ff_kept,
                accuracy: rep.accuracy,
                relative_accuracy_loss: rep.relative_accuracy_loss,
                trap_rate_total: rep.trap_rate_total,
                trap_rate_type1: rep.trap_rate_type1,
                trap_rate_type2: rep.trap_rate_type2,
                delta_selective_random: delta,
                distractor_accuracy: r.distractor_accuracy,
                distractor_similarity: rep.distractor_similarity,
                param_count: rep.param_count,
                param_delta: baseline.param_count - rep.param_count,
                flops_per_token: rep.flops_per_token,
                flops_delta: baseline.flops_per_token - rep.flops_per_token,
                positive_pruned: r.positive_pruned,
                finetuned_accuracy: r.finetune.as_ref().map(|f| f.accuracy),
                relative_gain: r.finetune.as_ref().and_then(|f| f.relative_gain),
                finetuned_trap_rate: r.finetune.as_ref().map(|f| f.trap_rate_total),
            }
        })
        .collect()
}

fn stage_summary(
    ctx: &Ctx<'_>,
    rows: &[SummaryRow],
    base: &ReportFile,
    base_dis: &Option<Vec<Transcript>>,
) -> Result<()> {
    let mut st = Stage::default();
    ctx.write(&mut st, &ctx.out.join("summary.csv"), &to_csv(rows))?;
    ctx.write(&mut st, &ctx.out.join("accuracy.svg"), accuracy_chart(rows).as_bytes())?;
    ctx.write(&mut st, &ctx.out.join("traps.svg"), trap_chart(rows).as_bytes())?;
    let dis_acc = match (base_dis, &ctx.cfg.distractor_prompts) {
        (Some(ts), Some(p)) => gold_accuracy(ts, &load_prompts(p)?),
        _ => None,
    };
    let report = SweepReport {
        baseline: base.clone(),
        baseline_distractor_accuracy: dis_acc,
        rows: rows.to_vec(),
    };
    ctx.write(&mut st, &ctx.out.join("report.json"), &to_json_pretty(&report))?;
    ctx.commit("summary", st)
}

/// Rebuilds the summary rows of a finished (or partial) sweep directory from
/// its point records, in manifest order.
pub fn load_rows(out: &Path) -> Result<Vec<SummaryRow>> {
    let report: SweepReport = read_json(&out.join("report.json"))?;
    Ok(report.rows)
}

/// Writes `rows` in the requested format next to the sweep.
pub fn export(rows: &[SummaryRow], format: &str, path: &Path) -> Result<()> {
    match format {
        "csv" => write_bytes(path, &to_csv(rows)),
        "svg" => write_bytes(path, accuracy_chart(rows).as_bytes()),
        "json" => write_json(&rows, path).map(|_| ()),
        other => Err(NsError::config("--format", format!("unknown format `{other}` (json|csv|svg)"))),
    }
}
