use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use colora_lab::colora::{merge, plan_ranks, AdapterSet, RankPlan};
use colora_lab::degrade::DegradationKind;
use colora_lab::faig::{faig_scores, FaigReport, Probe};
use colora_lab::harness::data::{center_crop, degrade_corpus, load_dir, load_pairs, write_synthetic_corpus};
use colora_lab::harness::{evaluate, finetune, pretrain, Model, Strategy, TrainConfig, Tuned};
use colora_lab::{Checkpoint, ModelSpec};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "colora-lab", version, about = "Degradation pre-training, FAIG attribution and CoLoRA fine-tuning")]
struct Cli {
    /// TOML file with TrainConfig fields and [task], [model], [strategy], [colora], [faig] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread and no wall-clock fields, for byte-stable output.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Degrade a directory of clean images into a replayable pair set.
    Degrade(DegradeArgs),
    /// Train a fresh model on random-order degradations of clean images.
    Pretrain(PretrainArgs),
    /// Adapt a pre-trained checkpoint to a pair set.
    Finetune(FinetuneArgs),
    /// Attribute the change between two checkpoints to layers and stages.
    Faig(FaigArgs),
    /// Turn a FAIG report into per-layer adapter ranks.
    PlanRanks(PlanArgs),
    /// Fold adapters into their base checkpoint.
    Merge(MergeArgs),
    /// PSNR of a checkpoint, or base plus adapters, on a pair set.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Degraded variants per clean image.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    max_depth: Option<usize>,
    /// Comma-separated subset of blur, noise, jpeg, motion_blur, rain.
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<DegradationKind>>,
    /// Gaussian sigma band on the 0-255 scale, e.g. `25,30`.
    #[arg(long, value_delimiter = ',')]
    noise_sigma: Option<Vec<f64>>,
    /// Restrict noise steps to the Gaussian model.
    #[arg(long)]
    no_poisson: bool,
    /// Fill the input directory with this many synthetic clean images first.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    clean_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Per-step loss log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    task_dir: PathBuf,
    /// Checkpoint for plain strategies, adapter file for colora and lora_fixed.
    #[arg(long)]
    out: PathBuf,
    /// full, colora, lora_fixed(16), decoder_only or bias_norm_only.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, conflicts_with = "faig_report")]
    plan: Option<PathBuf>,
    /// Plan ranks from this report with the configured alpha and beta.
    #[arg(long)]
    faig_report: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FaigArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Pair set; the first `faig.probe_pairs` pairs are center-cropped to `patch_size`.
    #[arg(long)]
    probe_dir: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    faig_report: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    min_rank: Option<usize>,
    /// Checkpoint, or JSON/TOML model spec; defaults to the configured model.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    adapters: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Evaluate `model` with these adapters attached.
    #[arg(long)]
    adapters: Option<PathBuf>,
    #[arg(long)]
    task_dir: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| path.display().to_string())
}

fn load_spec(path: &Path) -> Result<ModelSpec> {
    if let Ok(ckpt) = Checkpoint::<f32>::load(path) {
        return Ok(ckpt.spec);
    }
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let spec: ModelSpec = match serde_json::from_str(&text) {
        Ok(s) => s,
        Err(_) => toml::from_str(&text).with_context(|| format!("{} is not a checkpoint or model spec", path.display()))?,
    };
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let timed = !cli.deterministic;

    match cli.cmd {
        Cmd::Degrade(a) => {
            let mut task = cfg.task.clone();
            if let Some(n) = a.max_depth {
                task.max_depth = n;
            }
            if let Some(kinds) = a.kinds {
                task.kinds = kinds;
            }
            if let Some(s) = a.noise_sigma {
                let [lo, hi] = s[..] else { bail!("--noise-sigma takes two values, got {}", s.len()) };
                task.noise_sigma = [lo, hi];
            }
            if a.no_poisson {
                task.poisson_noise = false;
            }
            if let Some(n) = a.synthetic {
                write_synthetic_corpus(&a.input_dir, n, a.size, cfg.seed)?;
            }
            let entries = degrade_corpus(&a.input_dir, &a.output_dir, &task, cfg.seed, a.count)?;
            print_json(&serde_json::json!({ "pairs": entries.len(), "output_dir": a.output_dir }))?;
        }
        Cmd::Pretrain(a) => {
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            let clean: Vec<_> = load_dir(&a.clean_dir)?.into_iter().map(|(_, t)| t).collect();
            let start = Instant::now();
            let (ckpt, log) = pretrain(&cfg, &clean)?;
            ckpt.save(&a.out)?;
            if let Some(p) = &a.log {
                write_json(p, &log)?;
            }
            print_json(&serde_json::json!({
                "checkpoint": a.out,
                "steps": cfg.steps,
                "params": ckpt.param_count(),
                "final_loss": log.losses.last(),
                "wall_clock_s": timed.then(|| start.elapsed().as_secs_f64()),
            }))?;
        }
        Cmd::Finetune(a) => {
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(s) = a.strategy {
                cfg.strategy = s;
            }
            let base = Checkpoint::<f32>::load(&a.base)?;
            let pairs = load_pairs(&a.task_dir)?;
            let plan = match (&a.plan, &a.faig_report) {
                (Some(p), _) => Some(RankPlan::load(p)?),
                (None, Some(r)) => {
                    let report = FaigReport::load(r)?;
                    let c = &cfg.colora;
                    Some(plan_ranks(&report.normalized.values, c.alpha, c.beta, &base.spec, c.min_rank)?)
                }
                (None, None) => None,
            };
            if cfg.strategy == Strategy::Colora && plan.is_none() {
                bail!("colora needs --plan or --faig-report");
            }
            let out = finetune(&cfg, &base, &pairs, plan.as_ref())?;
            match &out.model {
                Tuned::Checkpoint(c) => c.save(&a.out)?,
                Tuned::Adapters(s) => s.save(&a.out)?,
            }
            if let Some(p) = &a.log {
                write_json(p, &out.log)?;
            }
            print_json(&serde_json::json!({
                "strategy": cfg.strategy.to_string(),
                "output": a.out,
                "tuned": out.tuned,
                "final_loss": out.log.losses.last(),
            }))?;
        }
        Cmd::Faig(a) => {
            let ba = Checkpoint::<f32>::load(&a.baseline)?;
            let ta = Checkpoint::<f32>::load(&a.target)?;
            let pairs = load_pairs(&a.probe_dir)?;
            let probe: Vec<_> = pairs
                .iter()
                .take(cfg.faig.probe_pairs)
                .map(|p| center_crop(p, cfg.patch_size).map(|c| (c.degraded, c.clean)))
                .collect::<colora_lab::Result<_>>()?;
            let steps = a.steps.unwrap_or(cfg.faig.steps);
            let report = faig_scores(&ba, &ta, &Probe::from_pairs(&probe)?, steps)?;
            report.save(&a.out)?;
            print_json(&report.normalized)?;
        }
        Cmd::PlanRanks(a) => {
            let report = FaigReport::load(&a.faig_report)?;
            let spec = match &a.spec {
                Some(p) => load_spec(p)?,
                None => cfg.model.clone(),
            };
            let plan = plan_ranks(
                &report.normalized.values,
                a.alpha.unwrap_or(cfg.colora.alpha),
                a.beta.unwrap_or(cfg.colora.beta),
                &spec,
                a.min_rank.unwrap_or(cfg.colora.min_rank),
            )?;
            plan.save(&a.out)?;
            print_json(&colora_lab::colora::tuned_param_count(&plan, &spec)?)?;
        }
        Cmd::Merge(a) => {
            let base = Checkpoint::<f32>::load(&a.base)?;
            let adapters = AdapterSet::<f32>::load(&a.adapters)?;
            let merged = merge(&base, &adapters)?;
            merged.save(&a.out)?;
            print_json(&serde_json::json!({ "checkpoint": a.out, "params": merged.param_count() }))?;
        }
        Cmd::Eval(a) => {
            let ckpt = Checkpoint::<f32>::load(&a.model)?;
            let pairs = load_pairs(&a.task_dir)?;
            let adapters = a.adapters.as_ref().map(AdapterSet::<f32>::load).transpose()?;
            let model = match &adapters {
                Some(s) => Model::Adapted { base: &ckpt, adapters: s },
                None => Model::Plain(&ckpt),
            };
            let report = evaluate(model, &pairs, timed)?;
            if let Some(p) = &a.out {
                write_json(p, &report)?;
            }
            print_json(&report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: bad arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
