//! Desk-scale replication: pre-train, fine-tune every strategy on a held-out
//! noise band, attribute the full fine-tune with FAIG, and compare.
//!
//! Every artifact lands in a work directory so two runs can be diffed byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Strategy, TrainConfig};
use super::data::{center_crop, degrade_corpus, load_dir, load_pairs, write_synthetic_corpus};
use super::train::{evaluate, finetune, pretrain, EvalReport, Model, TrainLog, Tuned};
use crate::checkpoint::write_file;
use crate::colora::{plan_ranks, RankPlan, TunedCount};
use crate::degrade::{DegradationKind, DegradeConfig};
use crate::error::{Error, Result};
use crate::faig::{faig_scores, FaigReport, Probe};
use crate::net::{ModelSpec, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicationConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub image_size: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub pretrain_images: usize,
    pub pretrain_steps: usize,
    /// Gaussian sigma band seen during pre-training.
    pub pretrain_sigma: [f64; 2],
    /// Held-out band the fine-tuning task is drawn from.
    pub task_sigma: [f64; 2],
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub finetune_steps: usize,
    pub probe_pairs: usize,
    pub faig_steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lora_rank: usize,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        ReplicationConfig {
            seed: 0,
            model: ModelSpec::default(),
            image_size: 64,
            patch_size: 32,
            batch_size: 8,
            pretrain_images: 64,
            pretrain_steps: 2000,
            pretrain_sigma: [1.0, 15.0],
            task_sigma: [25.0, 30.0],
            train_pairs: 64,
            eval_pairs: 16,
            finetune_steps: 500,
            probe_pairs: 8,
            faig_steps: 100,
            alpha: 1.0,
            beta: 0.2,
            lora_rank: 16,
        }
    }
}

impl ReplicationConfig {
    /// Minutes-long defaults shrunk to seconds, for smoke tests.
    pub fn tiny() -> Self {
        ReplicationConfig {
            model: ModelSpec {
                width: 4,
                enc_blocks: vec![1, 1],
                middle_blocks: 1,
                dec_blocks: vec![1, 1],
            },
            image_size: 32,
            patch_size: 16,
            batch_size: 2,
            pretrain_images: 4,
            pretrain_steps: 4,
            train_pairs: 4,
            eval_pairs: 2,
            finetune_steps: 3,
            probe_pairs: 2,
            faig_steps: 4,
            lora_rank: 2,
            ..Default::default()
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            patch_size: self.patch_size,
            model: self.model.clone(),
            ..Default::default()
        }
    }

    pub fn strategies(&self) -> [Strategy; 5] {
        [
            Strategy::Full,
            Strategy::Colora,
            Strategy::LoraFixed { rank: self.lora_rank },
            Strategy::DecoderOnly,
            Strategy::BiasNormOnly,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: String,
    pub psnr_rgb: f64,
    pub psnr_y: f64,
    /// Improvement over the frozen pre-trained model on the held-out pairs.
    pub gain_db: f64,
    pub tuned: TunedCount,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub config: ReplicationConfig,
    pub pretrain_first_loss: f64,
    pub pretrain_last_loss: f64,
    pub baseline_psnr_rgb: f64,
    pub baseline_psnr_y: f64,
    pub strategies: Vec<StrategyResult>,
    pub normalized_faig: BTreeMap<Stage, f64>,
    /// Mean normalized score over encoder and decoder stages.
    pub enc_dec_mean: f64,
    pub middle: f64,
    pub plan_ranks: BTreeMap<String, usize>,
    pub colora_fraction: f64,
    pub lora_fraction: f64,
    pub colora_below_lora_budget: bool,
    /// `full − colora` on held-out PSNR.
    pub colora_gap_to_full_db: f64,
}

impl ReplicationReport {
    pub fn result(&self, strategy: Strategy) -> Option<&StrategyResult> {
        let name = strategy.to_string();
        self.strategies.iter().find(|r| r.strategy == name)
    }

    pub fn ordering_holds(&self) -> bool {
        self.enc_dec_mean > self.middle
    }
}

/// File-system-safe name of a strategy's artifact.
pub fn artifact_stem(strategy: Strategy) -> String {
    match strategy {
        Strategy::LoraFixed { rank } => format!("lora_fixed_{rank}"),
        other => other.to_string(),
    }
}

fn loss_ends(log: &TrainLog) -> (f64, f64) {
    let n = (log.losses.len() / 10).max(1);
    (log.window_mean(n, false), log.window_mean(n, true))
}

fn save_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Runs the whole pipeline under `workdir`, which is created if needed.
pub fn replicate(cfg: &ReplicationConfig, workdir: &Path) -> Result<ReplicationReport> {
    let base_cfg = cfg.train_config();
    base_cfg.validate()?;
    let dir = |p: &str| -> PathBuf { workdir.join(p) };

    // pre-training corpus and held-out task, each from its own seed stream
    write_synthetic_corpus(&dir("data/pretrain"), cfg.pretrain_images, cfg.image_size, cfg.seed)?;
    write_synthetic_corpus(&dir("data/task_clean/train"), cfg.train_pairs, cfg.image_size, cfg.seed.wrapping_add(1))?;
    write_synthetic_corpus(&dir("data/task_clean/eval"), cfg.eval_pairs, cfg.image_size, cfg.seed.wrapping_add(2))?;
    let task = DegradeConfig {
        max_depth: 1,
        kinds: vec![DegradationKind::Noise],
        noise_sigma: cfg.task_sigma,
        poisson_noise: false,
    };
    degrade_corpus(&dir("data/task_clean/train"), &dir("data/task/train"), &task, cfg.seed.wrapping_add(3), 1)?;
    degrade_corpus(&dir("data/task_clean/eval"), &dir("data/task/eval"), &task, cfg.seed.wrapping_add(4), 1)?;
    let train = load_pairs(&dir("data/task/train"))?;
    let eval = load_pairs(&dir("data/task/eval"))?;

    let prod = TrainConfig {
        steps: cfg.pretrain_steps,
        task: DegradeConfig {
            noise_sigma: cfg.pretrain_sigma,
            ..Default::default()
        },
        ..base_cfg.clone()
    };
    let clean: Vec<_> = load_dir(&dir("data/pretrain"))?.into_iter().map(|(_, t)| t).collect();
    let (base, pre_log) = pretrain(&prod, &clean)?;
    base.save(dir("base.ckpt"))?;
    save_json(&dir("logs/pretrain.json"), &pre_log)?;
    let baseline = evaluate(Model::Plain(&base), &eval, false)?;
    save_json(&dir("eval/base.json"), &baseline)?;

    let ft_cfg = |strategy| TrainConfig {
        steps: cfg.finetune_steps,
        strategy,
        task: task.clone(),
        ..base_cfg.clone()
    };

    // full fine-tuning first: FAIG needs it to plan the colora ranks
    let full = finetune(&ft_cfg(Strategy::Full), &base, &train, None)?;
    let Tuned::Checkpoint(full_ckpt) = &full.model else {
        return Err(Error::InvalidArgument("full fine-tuning produced adapters".into()));
    };
    let probe_pairs: Vec<_> = train
        .iter()
        .take(cfg.probe_pairs)
        .map(|p| center_crop(p, cfg.patch_size).map(|c| (c.degraded, c.clean)))
        .collect::<Result<_>>()?;
    let probe = Probe::from_pairs(&probe_pairs)?;
    let faig = faig_scores(&base, full_ckpt, &probe, cfg.faig_steps)?;
    faig.save(dir("faig.json"))?;
    let plan = plan_ranks(&faig.normalized.values, cfg.alpha, cfg.beta, &cfg.model, 1)?;
    plan.save(dir("plan.json"))?;

    let mut results = Vec::new();
    let mut outputs = vec![(Strategy::Full, full)];
    for strategy in cfg.strategies().into_iter().skip(1) {
        outputs.push((strategy, finetune(&ft_cfg(strategy), &base, &train, Some(&plan))?));
    }
    for (strategy, out) in &outputs {
        let stem = artifact_stem(*strategy);
        let report: EvalReport = match &out.model {
            Tuned::Checkpoint(c) => {
                c.save(dir(&format!("{stem}.ckpt")))?;
                evaluate(Model::Plain(c), &eval, false)?
            }
            Tuned::Adapters(a) => {
                a.save(dir(&format!("{stem}.adapters")))?;
                evaluate(Model::Adapted { base: &base, adapters: a }, &eval, false)?
            }
        };
        save_json(&dir(&format!("eval/{stem}.json")), &report)?;
        save_json(&dir(&format!("logs/{stem}.json")), &out.log)?;
        let (first_loss, last_loss) = loss_ends(&out.log);
        results.push(StrategyResult {
            strategy: strategy.to_string(),
            psnr_rgb: report.mean_psnr_rgb,
            psnr_y: report.mean_psnr_y,
            gain_db: report.mean_psnr_rgb - baseline.mean_psnr_rgb,
            tuned: out.tuned,
            first_loss,
            last_loss,
        });
    }

    let report = summarize(cfg, &pre_log, &baseline, results, &faig, &plan)?;
    save_json(&dir("report.json"), &report)?;
    Ok(report)
}

fn summarize(
    cfg: &ReplicationConfig,
    pre_log: &TrainLog,
    baseline: &EvalReport,
    strategies: Vec<StrategyResult>,
    faig: &FaigReport,
    plan: &RankPlan,
) -> Result<ReplicationReport> {
    let norm = &faig.normalized.values;
    let side: Vec<f64> = norm
        .iter()
        .filter(|(s, _)| matches!(s, Stage::Enc(_) | Stage::Dec(_)))
        .map(|(_, v)| *v)
        .collect();
    let middle = *norm.get(&Stage::Middle).ok_or(Error::Empty("middle stage score"))?;
    let find = |s: Strategy| {
        let name = s.to_string();
        strategies
            .iter()
            .find(|r| r.strategy == name)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("missing result for {name}")))
    };
    let (full, colora, lora) = (
        find(Strategy::Full)?,
        find(Strategy::Colora)?,
        find(Strategy::LoraFixed { rank: cfg.lora_rank })?,
    );
    let (pretrain_first_loss, pretrain_last_loss) = loss_ends(pre_log);
    Ok(ReplicationReport {
        config: cfg.clone(),
        pretrain_first_loss,
        pretrain_last_loss,
        baseline_psnr_rgb: baseline.mean_psnr_rgb,
        baseline_psnr_y: baseline.mean_psnr_y,
        normalized_faig: norm.clone(),
        enc_dec_mean: side.iter().sum::<f64>() / side.len().max(1) as f64,
        middle,
        plan_ranks: plan.per_layer_rank.iter().map(|(id, r)| (id.to_string(), *r)).collect(),
        colora_fraction: colora.tuned.fraction,
        lora_fraction: lora.tuned.fraction,
        colora_below_lora_budget: colora.tuned.fraction < lora.tuned.fraction,
        colora_gap_to_full_db: full.psnr_rgb - colora.psnr_rgb,
        strategies,
    })
}
