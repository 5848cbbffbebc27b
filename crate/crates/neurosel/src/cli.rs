//! Command-line interface. Every flag that has a `RunConfig` counterpart
//! overrides the value read from `--config`.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use neurosel_core::eval::{AnswerFormat, EvalReport, EvalSettings, Tally};
use neurosel_core::finetune::train_lora;
use neurosel_core::generator::GenerationConfig;
use neurosel_core::pruner::{apply_prune, plan_prune, PruneMode};
use neurosel_core::selectivity::compute_selectivity;
use neurosel_core::synthlab::PlantedSpec;

use crate::config::{parse_modes, parse_ratios, FinetuneConfig, RunConfig, DEFAULT_SEEDS};
use crate::demo::init_demo;
use crate::error::{exit, NsError, Result};
use crate::files::{
    load_activations, load_adapter, load_examples, load_model, load_plan, load_prompt_files, load_prompts,
    load_scores, save_activations, save_adapter, save_model, save_plan, save_scores, to_json_pretty, write_bytes,
    write_json, write_jsonl, PlanFile,
};
use crate::pipeline::{bench_throughput, capture, evaluate};
use crate::report::ReportFile;
use crate::summary::{accuracy_chart, to_csv, trap_chart};
use crate::sweep::{run_sweep, SweepReport};

#[derive(Debug, Parser)]
#[command(name = "neurosel", version, about = "Activation-selectivity pruning for SwiGLU transformers")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
    Svg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Chart {
    Accuracy,
    Traps,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted demo model, prompt sets and a run config.
    InitDemo {
        #[arg(long, default_value = "demo")]
        out: PathBuf,
        /// Seed for the generic (non-planted) weights.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Capture mean absolute MLP activations for labeled prompts.
    Capture {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Labeled prompt files (JSONL); may be repeated.
        #[arg(long, num_args = 1..)]
        prompts: Vec<PathBuf>,
        #[arg(long, default_value = "activations.nsac")]
        out: PathBuf,
    },
    /// Compute selectivity scores from captured activations.
    Score {
        #[arg(long, default_value = "activations.nsac")]
        activations: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value = "scores.json")]
        out: PathBuf,
    },
    /// Choose the neurons to prune.
    Plan {
        #[arg(long, default_value = "scores.json")]
        scores: PathBuf,
        /// Fraction (0.15) or percentage (15).
        #[arg(long)]
        ratio: String,
        #[arg(long)]
        granularity: Option<usize>,
        #[arg(long, default_value = "selective")]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
    },
    /// Slice a model according to a plan.
    Prune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "plan.json")]
        plan: PathBuf,
        #[arg(long, default_value = "pruned.nscm")]
        out: PathBuf,
    },
    /// Greedy-decode a single prompt or a prompt file.
    Generate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Raw prompt text.
        #[arg(long, conflicts_with = "prompts")]
        text: Option<String>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        /// Write transcripts here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a model on prompts with gold answers.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long, value_parser = parse_answer_format)]
        answer_format: Option<AnswerFormat>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Also write the transcripts as JSONL.
        #[arg(long)]
        transcripts: Option<PathBuf>,
    },
    /// Train LoRA adapters on prompt/completion pairs.
    Finetune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `code` or `math`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "adapter.nsla")]
        out: PathBuf,
    },
    /// Run the full pipeline across ratios and modes.
    Sweep {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Capture prompt files.
        #[arg(long, num_args = 1..)]
        prompts: Vec<PathBuf>,
        /// `5..35`, `5..35:5` or a comma list.
        #[arg(long)]
        ratios: Option<String>,
        #[arg(long)]
        granularity: Option<usize>,
        /// Comma list of modes.
        #[arg(long, alias = "mode")]
        modes: Option<String>,
        /// Random-mode seeds, comma separated.
        #[arg(long, alias = "seeds")]
        seed: Option<String>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        preset: Option<String>,
        /// Skip fine-tuning even if the config enables it.
        #[arg(long)]
        no_finetune: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Measure greedy generation throughput.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "7=")]
        text: String,
        #[arg(long, default_value_t = 128)]
        tokens: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Print or export the summary of a finished sweep.
    Report {
        /// Sweep output directory.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
        format: OutputFormat,
        /// Chart drawn for `--format svg`.
        #[arg(long, value_enum, default_value_t = Chart::Accuracy)]
        chart: Chart,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_answer_format(s: &str) -> std::result::Result<AnswerFormat, String> {
    match s {
        "boxed" => Ok(AnswerFormat::Boxed),
        "leading" => Ok(AnswerFormat::Leading),
        other => Err(format!("unknown answer format `{other}` (boxed|leading)")),
    }
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn pick<T>(flag: Option<T>, cfg: Option<T>, field: &str) -> Result<T> {
    flag.or(cfg)
        .ok_or_else(|| NsError::config(field, format!("missing; pass --{} or set it in --config", field.replace('_', "-"))))
}

fn say(line: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line.as_ref());
}

fn emit(bytes: &[u8], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_bytes(p, bytes),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(bytes).map_err(|e| NsError::io(Path::new("<stdout>"), e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let cfg = cfg.as_ref();
    let settings = |max_new_tokens: Option<usize>, answer_format: Option<AnswerFormat>| -> Result<EvalSettings> {
        let mut generation = cfg.map_or_else(GenerationConfig::default, |c| c.generation.clone());
        if let Some(n) = max_new_tokens {
            generation.max_new_tokens = n;
        }
        generation
            .validate()
            .map_err(|e| NsError::config("max_new_tokens", e.to_string()))?;
        Ok(EvalSettings {
            generation,
            loop_params: cfg.map(|c| c.loop_params).unwrap_or_default(),
            answer_format: answer_format.or(cfg.map(|c| c.answer_format)).unwrap_or_default(),
        })
    };
    let model_path = |flag: Option<PathBuf>| pick(flag, cfg.map(|c| c.model.clone()), "model");

    match cli.command {
        Command::InitDemo { out, seed } => {
            let spec = PlantedSpec {
                seed,
                ..PlantedSpec::default()
            };
            let files = init_demo(&out, &spec)?;
            say(format!(
                "wrote demo to {} (d_ff {}, target fraction {:.5}); run: neurosel sweep --config {}",
                out.display(),
                spec.d_ff(),
                spec.target_fraction(),
                files.config.display()
            ));
        }
        Command::Capture { model, prompts, out } => {
            let (model, hash) = load_model(&model_path(model)?)?;
            let prompts = if prompts.is_empty() {
                pick(None, cfg.map(|c| c.capture_prompts.clone()), "prompts")?
            } else {
                prompts
            };
            let set = load_prompt_files(&prompts)?;
            let acts = capture(&model, &set, &hash)?;
            let sha = save_activations(&acts, &out)?;
            say(format!("{} prompts captured -> {} (sha256 {sha})", set.len(), out.display()));
        }
        Command::Score { activations, eps, out } => {
            let acts = load_activations(&activations)?;
            let eps = eps.or(cfg.map(|c| c.eps)).unwrap_or(neurosel_core::selectivity::DEFAULT_EPS);
            let scores = compute_selectivity(&acts, eps)?;
            let sha = save_scores(&scores, &out)?;
            say(format!(
                "scored {} layers x {} neurons -> {} (sha256 {sha})",
                scores.n_layers,
                scores.d_ff,
                out.display()
            ));
        }
        Command::Plan {
            scores,
            ratio,
            granularity,
            mode,
            seed,
            out,
        } => {
            let ratios = parse_ratios(&ratio)?;
            let [ratio] = ratios[..] else {
                return Err(NsError::config("--ratio", "expected a single ratio"));
            };
            let mode: PruneMode = mode.parse().map_err(|e: neurosel_core::Error| NsError::config("--mode", e.to_string()))?;
            let granularity = granularity
                .or(cfg.map(|c| c.pruning.granularity))
                .unwrap_or(neurosel_core::pruner::DEFAULT_GRANULARITY);
            let seed = match mode {
                PruneMode::Random => Some(seed.unwrap_or(DEFAULT_SEEDS[0])),
                _ => seed,
            };
            let scores = load_scores(&scores)?;
            let plan = plan_prune(&scores, ratio, granularity, mode, seed)?;
            save_plan(&plan, &out)?;
            let file = PlanFile::from(&plan);
            say(format!(
                "prune {} of {} neurons per layer: exact_ratio {}% -> {}",
                plan.prune_count,
                plan.d_ff,
                file.exact_ratio.percent,
                out.display()
            ));
        }
        Command::Prune { model, plan, out } => {
            let (model, _) = load_model(&model_path(model)?)?;
            let plan = load_plan(&plan)?;
            let pruned = apply_prune(&model, &plan)?;
            let sha = save_model(&pruned, &out)?;
            say(format!(
                "d_ff {} -> {}, params {} -> {} -> {} (sha256 {sha})",
                model.config.d_ff,
                pruned.config.d_ff,
                model.param_count(),
                pruned.param_count(),
                out.display()
            ));
        }
        Command::Generate {
            model,
            adapter,
            text,
            prompts,
            max_new_tokens,
            out,
        } => {
            let (model, _) = load_model(&model_path(model)?)?;
            let adapter = adapter.as_deref().map(load_adapter).transpose()?;
            let s = settings(max_new_tokens, None)?;
            let set = match (text, prompts) {
                (Some(t), _) => neurosel_core::capture::PromptSet::new(vec![neurosel_core::capture::Prompt {
                    id: "cli".into(),
                    text: t,
                    label: neurosel_core::capture::Label::Target,
                    gold: None,
                }]),
                (None, Some(p)) => load_prompts(&p)?,
                (None, None) => load_prompts(&pick(None, cfg.map(|c| c.eval_prompts.clone()), "prompts")?)?,
            };
            let ts = evaluate(&model, adapter.as_ref(), &set, &s)?;
            match out {
                Some(p) => {
                    write_jsonl(&ts, &p)?;
                    say(format!("{} transcripts -> {}", ts.len(), p.display()));
                }
                None => {
                    for t in &ts {
                        say(format!("{}\t{}", t.prompt_id, t.text.escape_debug()));
                    }
                }
            }
        }
        Command::Eval {
            model,
            adapter,
            prompts,
            max_new_tokens,
            answer_format,
            out,
            transcripts,
        } => {
            let (model, hash) = load_model(&model_path(model)?)?;
            let adapter = adapter.as_deref().map(load_adapter).transpose()?;
            let s = settings(max_new_tokens, answer_format)?;
            let set = load_prompts(&pick(prompts, cfg.map(|c| c.eval_prompts.clone()), "prompts")?)?;
            let ts = evaluate(&model, adapter.as_ref(), &set, &s)?;
            if let Some(p) = transcripts {
                write_jsonl(&ts, &p)?;
            }
            let report = EvalReport::new(&model, &Tally::from_transcripts(&ts), s.loop_params);
            let config_hash = cfg.map(RunConfig::fingerprint).transpose()?;
            let file = ReportFile::new(report, hash, config_hash);
            write_json(&file, &out)?;
            say(format!(
                "accuracy {:.4}, trap rate {:.4} (type1 {:.4}, type2 {:.4}) -> {}",
                file.report.accuracy,
                file.report.trap_rate_total,
                file.report.trap_rate_type1,
                file.report.trap_rate_type2,
                out.display()
            ));
        }
        Command::Finetune {
            model,
            data,
            preset,
            learning_rate,
            seed,
            out,
        } => {
            let (model, _) = load_model(&model_path(model)?)?;
            let base = cfg.and_then(|c| c.finetune.clone());
            let data = pick(data, base.as_ref().map(|f| f.data.clone()), "data")?;
            let lora = match preset {
                Some(_) => None,
                None => base.as_ref().and_then(|f| f.lora.clone()),
            };
            let ft = FinetuneConfig {
                preset: preset.or(base.as_ref().and_then(|f| f.preset.clone())),
                lora,
                learning_rate: learning_rate.or(base.as_ref().and_then(|f| f.learning_rate)),
                data: data.clone(),
                seed: seed.or(base.as_ref().map(|f| f.seed)).unwrap_or(0),
                modes: vec![PruneMode::Selective],
            };
            let lora = ft.resolve()?;
            let examples = load_examples(&data)?;
            let outcome = train_lora(&model, &examples, &lora, ft.seed)?;
            let sha = save_adapter(&outcome.adapter, &out)?;
            let losses: Vec<String> = outcome.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
            say(format!(
                "trained rank {} adapters on {} pairs, epoch losses [{}] -> {} (sha256 {sha})",
                lora.rank,
                examples.len(),
                losses.join(", "),
                out.display()
            ));
        }
        Command::Sweep {
            model,
            prompts,
            ratios,
            granularity,
            modes,
            seed,
            max_new_tokens,
            preset,
            no_finetune,
            out,
            jobs,
        } => {
            let mut run = cfg
                .cloned()
                .ok_or_else(|| NsError::config("--config", "sweep needs a run config (see init-demo)"))?;
            if let Some(m) = model {
                run.model = m;
            }
            if !prompts.is_empty() {
                run.capture_prompts = prompts;
            }
            if let Some(r) = ratios {
                run.pruning.ratios = parse_ratios(&r)?;
            }
            if let Some(g) = granularity {
                run.pruning.granularity = g;
            }
            if let Some(m) = modes {
                run.pruning.modes = parse_modes(&m)?;
            }
            if let Some(s) = seed {
                run.pruning.seeds = s
                    .split(',')
                    .map(|t| t.trim().parse().map_err(|_| NsError::config("--seed", format!("`{t}` is not a seed"))))
                    .collect::<Result<_>>()?;
            }
            if let Some(n) = max_new_tokens {
                run.generation.max_new_tokens = n;
            }
            if no_finetune {
                run.finetune = None;
            } else if let (Some(p), Some(f)) = (preset, run.finetune.as_mut()) {
                f.preset = Some(p);
                f.lora = None;
            }
            if let Some(o) = out {
                run.out_dir = o;
            }
            if let Some(j) = jobs {
                run.jobs = j;
            }
            let outcome = run_sweep(&run)?;
            say(format!(
                "{} sweep rows -> {} ({} stages reused)",
                outcome.rows.len(),
                outcome.out_dir.join("summary.csv").display(),
                outcome.resumed.len()
            ));
        }
        Command::Bench {
            model,
            text,
            tokens,
            repeats,
        } => {
            let (model, _) = load_model(&model_path(model)?)?;
            let r = bench_throughput(&model, &text, tokens, repeats)?;
            emit(&to_json_pretty(&r), None)?;
        }
        Command::Report {
            sweep,
            format,
            chart,
            out,
        } => {
            let dir = pick(sweep, cfg.map(|c| c.out_dir.clone()), "sweep")?;
            let report: SweepReport = crate::files::read_json(&dir.join("report.json"))?;
            let bytes = match format {
                OutputFormat::Json => to_json_pretty(&report),
                OutputFormat::Csv => to_csv(&report.rows),
                OutputFormat::Svg => match chart {
                    Chart::Accuracy => accuracy_chart(&report.rows).into_bytes(),
                    Chart::Traps => trap_chart(&report.rows).into_bytes(),
                },
            };
            emit(&bytes, out.as_deref())?;
        }
    }
    Ok(())
}
