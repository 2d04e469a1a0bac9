//! Pre-training, fine-tuning and evaluation loops.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{LossKind, Strategy, TrainConfig};
use super::data::{crop, stack, stream_rng, Augment, Pair};
use super::metrics::{psnr_metric, Domain};
use super::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::autograd::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::colora::{AdapterBinder, AdapterSet, RankPlan, TunedCount};
use crate::degrade::{apply_recipe, sample_recipe};
use crate::error::{Error, Result};
use crate::net::{self, LayerId, ModelSpec, ParamBinder, Stage};
use crate::tensor::Tensor;

/// Per-step training loss, recorded before each update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the first or last `n` steps.
    pub fn window_mean(&self, n: usize, tail: bool) -> f64 {
        let n = n.clamp(1, self.losses.len().max(1));
        let s = if tail { &self.losses[self.losses.len() - n..] } else { &self.losses[..n] };
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Something that can be trained: records a forward pass and exposes its trainable tensors.
trait Trainee {
    fn forward(&self, g: &mut Graph<f32>, x: NodeId) -> Result<NodeId>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)>;
}

struct Plain {
    ckpt: Checkpoint<f32>,
    trainable: fn(&LayerId) -> bool,
}

impl Trainee for Plain {
    fn forward(&self, g: &mut Graph<f32>, x: NodeId) -> Result<NodeId> {
        let mut binder = ParamBinder {
            params: &self.ckpt.params,
            trainable: &self.trainable,
        };
        net::forward_graph(&self.ckpt.spec, g, &mut binder, x)
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let keep = self.trainable;
        self.ckpt
            .params
            .iter_mut()
            .filter(|(id, _)| keep(id))
            .map(|(id, t)| (id.to_string(), t))
            .collect()
    }
}

struct Adapted<'a> {
    base: &'a Checkpoint<f32>,
    set: AdapterSet<f32>,
}

impl Trainee for Adapted<'_> {
    fn forward(&self, g: &mut Graph<f32>, x: NodeId) -> Result<NodeId> {
        let mut binder = AdapterBinder {
            base: self.base,
            adapters: &self.set,
            trainable: true,
        };
        net::forward_graph(&self.base.spec, g, &mut binder, x)
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        self.set.named_mut()
    }
}

fn train_loop(
    cfg: &TrainConfig,
    model: &mut dyn Trainee,
    mut next_batch: impl FnMut(usize) -> Result<(Tensor<f32>, Tensor<f32>)>,
) -> Result<TrainLog> {
    let mut opt = AdamW::new(AdamWConfig {
        betas: cfg.betas,
        weight_decay: cfg.weight_decay,
        eps: cfg.eps,
    });
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let (input, target) = next_batch(step)?;
        let n = input.dim(0);
        let mut g = Graph::new();
        let x = g.constant(input);
        let y = model.forward(&mut g, x)?;
        let loss = match cfg.loss {
            LossKind::Psnr => g.loss_psnr_grouped(y, &target, 1.0, n)?,
            LossKind::L1 => g.loss_l1(y, &target)?,
        };
        log.losses.push(f64::from(g.value(loss).item()));
        let grads = g.backprop(loss)?;
        let lr = cosine_lr(step, cfg.steps, cfg.lr_start, cfg.lr_min)?;
        opt.step(model.named_mut(), &grads, lr)?;
    }
    Ok(log)
}

fn loss_name(loss: LossKind) -> String {
    match loss {
        LossKind::Psnr => "psnr".into(),
        LossKind::L1 => "l1".into(),
    }
}

/// Random-order-degradation pre-training on clean `[3,H,W]` images.
///
/// Every step crops one patch per batch slot, augments it, and degrades it
/// with a freshly sampled recipe.
pub fn pretrain(cfg: &TrainConfig, clean: &[Tensor<f32>]) -> Result<(Checkpoint<f32>, TrainLog)> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(Error::Empty("clean corpus"));
    }
    let p = cfg.patch_size;
    if let Some(small) = clean.iter().find(|c| c.dim(1) < p || c.dim(2) < p) {
        return Err(Error::InvalidArgument(format!(
            "clean image {:?} smaller than patch size {p}",
            small.shape()
        )));
    }
    let mut model = Plain {
        ckpt: Checkpoint::build(&cfg.model, cfg.seed)?,
        trainable: |_| true,
    };
    let mut rng = stream_rng(cfg.seed, 1);
    let log = train_loop(cfg, &mut model, |_| {
        let mut jobs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let img = &clean[rng.random_range(0..clean.len())];
            let (y, x) = (rng.random_range(0..=img.dim(1) - p), rng.random_range(0..=img.dim(2) - p));
            let aug = if cfg.augment { Augment::sample(&mut rng) } else { Augment::default() };
            let recipe = sample_recipe(&mut rng, &cfg.task)?;
            jobs.push((aug.apply(&crop(img, y, x, p)?), recipe));
        }
        let degraded: Vec<Tensor<f32>> = jobs
            .par_iter()
            .map(|(patch, recipe)| apply_recipe(patch, recipe))
            .collect::<Result<_>>()?;
        let clean: Vec<Tensor<f32>> = jobs.into_iter().map(|(patch, _)| patch).collect();
        Ok((stack(&degraded)?, stack(&clean)?))
    })?;
    let mut ckpt = model.ckpt;
    ckpt.meta.steps = cfg.steps as u64;
    ckpt.meta.loss = loss_name(cfg.loss);
    ckpt.meta.strategy = Some("pretrain".into());
    ckpt.meta.tuned = Some(TunedCount::new(ckpt.param_count(), ckpt.param_count()));
    Ok((ckpt, log))
}

fn trainable_mask(strategy: Strategy) -> fn(&LayerId) -> bool {
    match strategy {
        Strategy::DecoderOnly => |id| matches!(id.stage, Stage::Dec(_) | Stage::End),
        Strategy::BiasNormOnly => |id| id.is_extra(),
        _ => |_| true,
    }
}

/// Parameters a strategy trains, counted from the layer shapes.
pub fn strategy_tuned_count(strategy: Strategy, spec: &ModelSpec, plan: Option<&RankPlan>) -> Result<TunedCount> {
    match strategy {
        Strategy::Colora => {
            let plan = plan.ok_or_else(|| Error::InvalidArgument("colora needs a rank plan".into()))?;
            crate::colora::tuned_param_count(plan, spec)
        }
        Strategy::LoraFixed { rank } => crate::colora::tuned_param_count(&RankPlan::fixed(spec, rank)?, spec),
        other => {
            let keep = trainable_mask(other);
            let count = spec
                .layers()
                .iter()
                .filter(|(id, _)| keep(id))
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            Ok(TunedCount::new(count, spec.param_count()))
        }
    }
}

/// Result of fine-tuning: a plain checkpoint or adapters over the frozen base.
#[derive(Clone, Debug, PartialEq)]
pub enum Tuned {
    Checkpoint(Checkpoint<f32>),
    Adapters(AdapterSet<f32>),
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub model: Tuned,
    pub log: TrainLog,
    pub tuned: TunedCount,
}

/// Fine-tunes `base` on `(degraded, clean)` pairs under `cfg.strategy`.
///
/// `colora` requires `plan`; `lora_fixed` builds its own uniform plan.
pub fn finetune(cfg: &TrainConfig, base: &Checkpoint<f32>, pairs: &[Pair], plan: Option<&RankPlan>) -> Result<FinetuneOutput> {
    cfg.validate()?;
    base.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("task pair set"));
    }
    let p = cfg.patch_size;
    if p % base.spec.downsampling() != 0 {
        return Err(Error::Config(format!("patch_size {p} not divisible by {}", base.spec.downsampling())));
    }
    if let Some(small) = pairs.iter().find(|c| c.clean.dim(1) < p || c.clean.dim(2) < p) {
        return Err(Error::InvalidArgument(format!("pair {} smaller than patch size {p}", small.name)));
    }
    let tuned = strategy_tuned_count(cfg.strategy, &base.spec, plan)?;
    let mut rng = stream_rng(cfg.seed, 2);
    let batches = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut deg = Vec::with_capacity(cfg.batch_size);
        let mut clean = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pair = &pairs[rng.random_range(0..pairs.len())];
            let (h, w) = (pair.clean.dim(1), pair.clean.dim(2));
            let (y, x) = (rng.random_range(0..=h - p), rng.random_range(0..=w - p));
            let aug = if cfg.augment { Augment::sample(rng) } else { Augment::default() };
            deg.push(aug.apply(&crop(&pair.degraded, y, x, p)?));
            clean.push(aug.apply(&crop(&pair.clean, y, x, p)?));
        }
        Ok((stack(&deg)?, stack(&clean)?))
    };
    let (model, log) = match cfg.strategy {
        Strategy::Colora | Strategy::LoraFixed { .. } => {
            let plan = match (cfg.strategy, plan) {
                (Strategy::LoraFixed { rank }, _) => RankPlan::fixed(&base.spec, rank)?,
                (_, Some(plan)) => plan.clone(),
                (_, None) => return Err(Error::InvalidArgument("colora needs a rank plan".into())),
            };
            let mut trainee = Adapted {
                base,
                set: AdapterSet::attach(base, &plan, cfg.seed)?,
            };
            let log = train_loop(cfg, &mut trainee, |_| batches(&mut rng))?;
            (Tuned::Adapters(trainee.set), log)
        }
        strategy => {
            let mut trainee = Plain {
                ckpt: base.clone(),
                trainable: trainable_mask(strategy),
            };
            let log = train_loop(cfg, &mut trainee, |_| batches(&mut rng))?;
            let mut ckpt = trainee.ckpt;
            ckpt.meta.steps = cfg.steps as u64;
            ckpt.meta.loss = loss_name(cfg.loss);
            ckpt.meta.strategy = Some(strategy.to_string());
            ckpt.meta.tuned = Some(tuned);
            (Tuned::Checkpoint(ckpt), log)
        }
    };
    Ok(FinetuneOutput { model, log, tuned })
}

/// A model to evaluate.
#[derive(Clone, Copy, Debug)]
pub enum Model<'a> {
    Plain(&'a Checkpoint<f32>),
    Adapted {
        base: &'a Checkpoint<f32>,
        adapters: &'a AdapterSet<f32>,
    },
}

impl Model<'_> {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            Model::Plain(c) => &c.spec,
            Model::Adapted { base, .. } => &base.spec,
        }
    }

    /// Forward pass; indivisible inputs are edge-padded and cropped back.
    pub fn restore(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let &[3, h, w] = img.shape() else {
            return Err(Error::shape("restore", format!("expected [3,H,W], got {:?}", img.shape())));
        };
        let f = self.spec().downsampling();
        let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        let src = img.data();
        let padded = Tensor::from_fn(&[1, 3, ph, pw], |i| {
            let (c, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
            src[c * h * w + y.min(h - 1) * w + x.min(w - 1)]
        });
        let out = match self {
            Model::Plain(c) => c.forward(&padded)?,
            Model::Adapted { base, adapters } => crate::colora::adapted_forward(base, adapters, &padded)?,
        };
        let o = out.data();
        Ok(Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            o[c * ph * pw + y * pw + x].clamp(0.0, 1.0)
        }))
    }

    pub fn tuned(&self) -> Result<Option<TunedCount>> {
        Ok(match self {
            Model::Plain(c) => c.meta.tuned,
            Model::Adapted { adapters, .. } => Some(adapters.tuned_count()?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr_rgb: f64,
    pub psnr_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr_rgb: f64,
    pub mean_psnr_y: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tuned: Option<TunedCount>,
    /// Omitted in deterministic runs so reports compare byte for byte.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_s: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// PSNR of the restored degraded images against their clean versions.
pub fn evaluate(model: Model<'_>, pairs: &[Pair], timed: bool) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let start = Instant::now();
    let images: Vec<ImageScore> = pairs
        .par_iter()
        .map(|p| {
            let out = model.restore(&p.degraded)?;
            Ok(ImageScore {
                name: p.name.clone(),
                psnr_rgb: psnr_metric(&out, &p.clean, Domain::Rgb)?,
                psnr_y: psnr_metric(&out, &p.clean, Domain::Y)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = images.len() as f64;
    Ok(EvalReport {
        mean_psnr_rgb: images.iter().map(|s| s.psnr_rgb).sum::<f64>() / n,
        mean_psnr_y: images.iter().map(|s| s.psnr_y).sum::<f64>() / n,
        images,
        tuned: model.tuned()?,
        wall_clock_s: timed.then(|| start.elapsed().as_secs_f64()),
    })
}

/// Per-layer change between two checkpoints, used to confirm frozen layers stayed put.
pub fn changed_layers(a: &Checkpoint<f32>, b: &Checkpoint<f32>) -> BTreeMap<LayerId, bool> {
    a.params
        .iter()
        .map(|(id, t)| (*id, b.params.get(id).is_none_or(|u| u != t)))
        .collect()
}
