//! Filter attribution via integrated gradients between a baseline and a
//! fine-tuned target model, aggregated per layer and per stage.
//!
//! The path runs from the target (`β = 0`) to the baseline (`β = 1`):
//! `ρ(β) = θ_ta + β(θ_ba − θ_ta)`, sampled at left endpoints `β_t = t/M`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::net::{self, LayerId, ParamBinder, Stage};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_STEPS: usize = 100;

/// Gradient evaluations kept in flight at once.
const CHUNK: usize = 16;

/// A fixed batch of `(degraded, clean)` pairs, both `[N,3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe<T: Real = f32> {
    pub degraded: Tensor<T>,
    pub clean: Tensor<T>,
}

impl<T: Real> Probe<T> {
    pub fn new(degraded: Tensor<T>, clean: Tensor<T>) -> Result<Self> {
        if degraded.shape().len() != 4 || degraded.dim(0) == 0 {
            return Err(Error::Empty("probe set"));
        }
        degraded.expect_same_shape(&clean, "probe")?;
        Ok(Probe { degraded, clean })
    }

    /// Stacks `[3,H,W]` pairs into one batch.
    pub fn from_pairs(pairs: &[(Tensor<T>, Tensor<T>)]) -> Result<Self> {
        let first = pairs.first().ok_or(Error::Empty("probe set"))?;
        let shape = first.0.shape().to_vec();
        let mut deg = Vec::new();
        let mut clean = Vec::new();
        for (d, c) in pairs {
            if d.shape() != shape.as_slice() || c.shape() != shape.as_slice() {
                return Err(Error::shape("probe", format!("pair shapes differ from {shape:?}")));
            }
            deg.extend_from_slice(d.data());
            clean.extend_from_slice(c.data());
        }
        let mut batch = vec![pairs.len()];
        batch.extend_from_slice(&shape);
        Probe::new(Tensor::new(&batch, deg)?, Tensor::new(&batch, clean)?)
    }

    pub fn len(&self) -> usize {
        self.degraded.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Real>(&self) -> Probe<U> {
        Probe {
            degraded: self.degraded.cast(),
            clean: self.clean.cast(),
        }
    }

    pub fn describe(&self) -> ProbeInfo {
        ProbeInfo {
            pairs: self.len(),
            height: self.degraded.dim(2),
            width: self.degraded.dim(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeInfo {
    pub pairs: usize,
    pub height: usize,
    pub width: usize,
}

/// Elementwise `(1−β)·ta + β·ba`; exact at both endpoints.
pub fn lerp_params<K: Ord + Clone, T: Real>(
    ba: &BTreeMap<K, Tensor<T>>,
    ta: &BTreeMap<K, Tensor<T>>,
    beta: f64,
) -> Result<BTreeMap<K, Tensor<T>>> {
    if ba.len() != ta.len() {
        return Err(Error::TopologyMismatch("parameter sets differ".into()));
    }
    let (b, a) = (T::of(beta), T::of(1.0 - beta));
    ba.iter()
        .map(|(k, vb)| {
            let vt = ta
                .get(k)
                .ok_or_else(|| Error::TopologyMismatch("parameter sets differ".into()))?;
            let v = vt
                .zip_map(vb, |t, x| a * t + b * x)
                .map_err(|_| Error::TopologyMismatch("parameter shapes differ".into()))?;
            Ok((k.clone(), v))
        })
        .collect()
}

/// `ρ(β)` between two checkpoints.
pub fn interpolate<T: Real>(ba: &Checkpoint<T>, ta: &Checkpoint<T>, beta: f64) -> Result<Checkpoint<T>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::OutOfDomain(format!("beta {beta} outside [0,1]")));
    }
    ba.same_topology(ta)?;
    Ok(Checkpoint {
        spec: ta.spec.clone(),
        params: lerp_params(&ba.params, &ta.params, beta)?,
        meta: ta.meta.clone(),
    })
}

/// Signed per-element attribution `(ba − ta) · (1/M) Σ_t ∇L(ρ(β_t))`.
///
/// `grad` must be deterministic; evaluations may run concurrently but are
/// accumulated in `t` order.
pub fn path_integral<K, T, F>(
    ba: &BTreeMap<K, Tensor<T>>,
    ta: &BTreeMap<K, Tensor<T>>,
    steps: usize,
    grad: F,
) -> Result<BTreeMap<K, Tensor<T>>>
where
    K: Ord + Clone + Send + Sync,
    T: Real,
    F: Fn(&BTreeMap<K, Tensor<T>>) -> Result<BTreeMap<K, Tensor<T>>> + Sync,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("integration steps must be ≥ 1".into()));
    }
    let mut acc: BTreeMap<K, Tensor<T>> = ta.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
    let ts: Vec<usize> = (0..steps).collect();
    for chunk in ts.chunks(CHUNK) {
        let grads: Vec<BTreeMap<K, Tensor<T>>> = chunk
            .par_iter()
            .map(|&t| grad(&lerp_params(ba, ta, t as f64 / steps as f64)?))
            .collect::<Result<_>>()?;
        for g in grads {
            for (k, a) in acc.iter_mut() {
                let gk = g
                    .get(k)
                    .ok_or_else(|| Error::TopologyMismatch("gradient missing a parameter".into()))?;
                *a = a.add(gk)?;
            }
        }
    }
    let inv_m = T::of(1.0 / steps as f64);
    acc.into_iter()
        .map(|(k, sum)| {
            let diff = ba[&k].sub(&ta[&k])?;
            let v = diff.zip_map(&sum, |d, s| d * s * inv_m)?;
            Ok((k, v))
        })
        .collect()
}

/// Probe loss: mean `-PSNR` over the probe images.
pub fn probe_loss<T: Real>(ckpt: &Checkpoint<T>, probe: &Probe<T>) -> Result<f64> {
    let out = ckpt.forward(&probe.degraded)?;
    Ok(crate::autograd::kernels::psnr_loss_forward(&out, &probe.clean, 1.0, probe.len())?.f64())
}

/// Gradient of the probe loss with respect to every parameter.
pub fn probe_gradient<T: Real>(
    spec: &crate::net::ModelSpec,
    params: &BTreeMap<LayerId, Tensor<T>>,
    probe: &Probe<T>,
) -> Result<BTreeMap<LayerId, Tensor<T>>> {
    let mut g = Graph::new();
    let x = g.constant(probe.degraded.clone());
    let mut binder = ParamBinder {
        params,
        trainable: &|_| true,
    };
    let y = net::forward_graph(spec, &mut g, &mut binder, x)?;
    let loss = g.loss_psnr_grouped(y, &probe.clean, 1.0, probe.len())?;
    let mut grads = g.backprop(loss)?;
    params
        .keys()
        .map(|id| {
            let t = grads
                .remove(&id.to_string())
                .ok_or_else(|| Error::TopologyMismatch(format!("no gradient for {id}")))?;
            Ok((*id, t))
        })
        .collect()
}

/// Signed attribution for every parameter of a checkpoint pair.
pub fn attribution<T: Real>(
    ba: &Checkpoint<T>,
    ta: &Checkpoint<T>,
    probe: &Probe<T>,
    steps: usize,
) -> Result<BTreeMap<LayerId, Tensor<T>>> {
    ba.same_topology(ta)?;
    if probe.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    path_integral(&ba.params, &ta.params, steps, |p| probe_gradient(&ta.spec, p, probe))
}

/// Layer score: conv weights sum each output filter before taking `|·|`,
/// vectors take `|·|` per element; kernel scores add up per layer.
pub fn layer_scores<T: Real>(attr: &BTreeMap<LayerId, Tensor<T>>) -> BTreeMap<LayerId, f64> {
    attr.iter()
        .map(|(id, t)| {
            let kernel = if id.is_conv_weight() { t.numel() / t.dim(0) } else { 1 };
            let score = t
                .data()
                .chunks(kernel)
                .map(|k| k.iter().map(|v| v.f64()).sum::<f64>().abs())
                .sum();
            (*id, score)
        })
        .collect()
}

/// Mean of member-layer scores for every stage present.
pub fn stage_scores(per_layer: &BTreeMap<LayerId, f64>) -> BTreeMap<Stage, f64> {
    let mut sums: BTreeMap<Stage, (f64, usize)> = BTreeMap::new();
    for (id, &s) in per_layer {
        let e = sums.entry(id.stage).or_default();
        e.0 += s;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub values: BTreeMap<Stage, f64>,
    /// Every included stage scored zero; values are all zero.
    pub all_zero: bool,
}

/// Divides the non-boundary stage scores by their maximum. Intro and end are dropped.
pub fn normalize_stage_scores(per_stage: &BTreeMap<Stage, f64>) -> Result<Normalized> {
    let included: BTreeMap<Stage, f64> = per_stage
        .iter()
        .filter(|(s, _)| !s.is_boundary())
        .map(|(s, v)| (*s, *v))
        .collect();
    if included.is_empty() {
        return Err(Error::Empty("stage scores"));
    }
    if let Some((s, v)) = included.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::OutOfDomain(format!("stage {s} score {v} is not a finite non-negative value")));
    }
    let max = included.values().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(Normalized {
            values: included.into_keys().map(|s| (s, 0.0)).collect(),
            all_zero: true,
        });
    }
    Ok(Normalized {
        values: included.into_iter().map(|(s, v)| (s, v / max)).collect(),
        all_zero: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaigReport {
    pub steps: usize,
    pub probe: ProbeInfo,
    /// Number of per-task reports averaged into this one.
    pub tasks: usize,
    pub per_layer: BTreeMap<LayerId, f64>,
    pub per_stage: BTreeMap<Stage, f64>,
    pub normalized: Normalized,
}

impl FaigReport {
    pub fn from_layers(per_layer: BTreeMap<LayerId, f64>, steps: usize, probe: ProbeInfo) -> Result<Self> {
        let per_stage = stage_scores(&per_layer);
        let normalized = normalize_stage_scores(&per_stage)?;
        Ok(FaigReport {
            steps,
            probe,
            tasks: 1,
            per_layer,
            per_stage,
            normalized,
        })
    }

    /// Elementwise mean of per-task reports, normalized afterwards.
    pub fn average(reports: &[FaigReport]) -> Result<Self> {
        let first = reports.first().ok_or(Error::Empty("report list"))?;
        let mut per_layer = first.per_layer.clone();
        for r in &reports[1..] {
            if r.per_layer.len() != per_layer.len() {
                return Err(Error::TopologyMismatch("reports cover different layers".into()));
            }
            for (id, v) in per_layer.iter_mut() {
                *v += r
                    .per_layer
                    .get(id)
                    .ok_or_else(|| Error::TopologyMismatch(format!("report lacks {id}")))?;
            }
        }
        let n = reports.len() as f64;
        per_layer.values_mut().for_each(|v| *v /= n);
        let mut out = FaigReport::from_layers(per_layer, first.steps, first.probe.clone())?;
        out.tasks = reports.iter().map(|r| r.tasks).sum();
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::checkpoint::write_file(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = crate::checkpoint::read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Per-layer, per-stage and normalized FAIG scores.
pub fn faig_scores<T: Real>(ba: &Checkpoint<T>, ta: &Checkpoint<T>, probe: &Probe<T>, steps: usize) -> Result<FaigReport> {
    let attr = attribution(ba, ta, probe, steps)?;
    FaigReport::from_layers(layer_scores(&attr), steps, probe.describe())
}

/// `|Σ signed attribution − (L(ba) − L(ta))|`.
pub fn completeness_residual<T: Real>(ba: &Checkpoint<T>, ta: &Checkpoint<T>, probe: &Probe<T>, steps: usize) -> Result<f64> {
    let attr = attribution(ba, ta, probe, steps)?;
    let total: f64 = attr.values().flat_map(|t| t.data().iter().map(|v| v.f64())).sum();
    let gap = probe_loss(ba, probe)? - probe_loss(ta, probe)?;
    Ok((total - gap).abs())
}
