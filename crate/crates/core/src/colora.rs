//! Contribution-based low-rank adaptation.
//!
//! Each conv weight `W₀` of shape `[Cout,Cin,kh,kw]` is treated as a `d×k`
//! matrix with `d = Cout`, `k = Cin·kh·kw`, and adapted as `W₀ + B·A` with
//! `A: [r,k]`, `B: [d,r]`. Stage ranks come from normalized FAIG scores.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, NodeId};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::net::{self, Binder, LayerId, ModelSpec, Stage};
use crate::tensor::{Real, Tensor};

pub const THRESHOLD: f64 = 0.5;

/// `r(d+k)/(d·k)`: adapter size relative to the full matrix.
pub fn delta_of_rank(r: usize, d: usize, k: usize) -> f64 {
    (r * (d + k)) as f64 / (d * k) as f64
}

/// Unclamped, unrounded inverse of [`delta_of_rank`].
pub fn rank_of_delta(delta: f64, d: usize, k: usize) -> f64 {
    delta * (d * k) as f64 / (d + k) as f64
}

/// `(d, k)` of a conv weight shape.
pub fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1..].iter().product())
}

/// `δˢ = Norm·α` above the threshold (strictly), `Norm·β` otherwise.
pub fn stage_deltas(norm: &BTreeMap<Stage, f64>, alpha: f64, beta: f64) -> BTreeMap<Stage, f64> {
    norm.iter()
        .map(|(s, &n)| (*s, if n > THRESHOLD { n * alpha } else { n * beta }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum RankRule {
    Contribution { alpha: f64, beta: f64, threshold: f64, min_rank: usize },
    Fixed { rank: usize },
}

/// Which tensors a fine-tune touches and at what rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub spec: ModelSpec,
    #[serde(flatten)]
    pub rule: RankRule,
    pub per_stage_delta: BTreeMap<Stage, f64>,
    /// Low-rank adapted conv weights. A rank of 0 means the layer stays frozen.
    pub per_layer_rank: BTreeMap<LayerId, usize>,
    /// Bias, gain and shift tensors trained directly.
    pub tunable_extras: BTreeSet<LayerId>,
    /// Conv weights trained directly (intro and end under the contribution rule).
    pub full_layers: BTreeSet<LayerId>,
}

/// Rank plan from normalized stage scores. `min_rank` is the lower clamp (normally 1).
pub fn plan_ranks(
    norm_scores: &BTreeMap<Stage, f64>,
    alpha: f64,
    beta: f64,
    spec: &ModelSpec,
    min_rank: usize,
) -> Result<RankPlan> {
    spec.validate()?;
    if norm_scores.is_empty() {
        return Err(Error::Empty("normalized stage scores"));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::OutOfDomain(format!("alpha={alpha}, beta={beta}: both must be > 0")));
    }
    let stages = spec.stages();
    for (s, v) in norm_scores {
        if !stages.contains(s) || s.is_boundary() {
            return Err(Error::TopologyMismatch(format!("score for stage {s} not in the model")));
        }
        if !(0.0..=1.0).contains(v) {
            return Err(Error::OutOfDomain(format!("stage {s} score {v} is not normalized")));
        }
    }
    if let Some(s) = stages.iter().find(|s| !s.is_boundary() && !norm_scores.contains_key(s)) {
        return Err(Error::TopologyMismatch(format!("no score for stage {s}")));
    }
    let per_stage_delta = stage_deltas(norm_scores, alpha, beta);
    let mut plan = RankPlan {
        spec: spec.clone(),
        rule: RankRule::Contribution {
            alpha,
            beta,
            threshold: THRESHOLD,
            min_rank,
        },
        per_stage_delta,
        per_layer_rank: BTreeMap::new(),
        tunable_extras: BTreeSet::new(),
        full_layers: BTreeSet::new(),
    };
    for (id, shape) in spec.layers() {
        if id.is_extra() {
            plan.tunable_extras.insert(id);
        } else if id.stage.is_boundary() {
            plan.full_layers.insert(id);
        } else {
            let (d, k) = matrix_dims(&shape);
            let raw = rank_of_delta(plan.per_stage_delta[&id.stage], d, k);
            let r = ((raw + 0.5).floor() as usize).clamp(min_rank, d.min(k));
            plan.per_layer_rank.insert(id, r);
        }
    }
    Ok(plan)
}

impl RankPlan {
    /// Plain LoRA: rank `r` on every conv weight, everything else frozen.
    pub fn fixed(spec: &ModelSpec, rank: usize) -> Result<Self> {
        spec.validate()?;
        if rank == 0 {
            return Err(Error::InvalidArgument("fixed rank must be ≥ 1".into()));
        }
        Ok(RankPlan {
            spec: spec.clone(),
            rule: RankRule::Fixed { rank },
            per_stage_delta: BTreeMap::new(),
            per_layer_rank: spec
                .layers()
                .into_iter()
                .filter(|(id, _)| id.is_conv_weight())
                .map(|(id, _)| (id, rank))
                .collect(),
            tunable_extras: BTreeSet::new(),
            full_layers: BTreeSet::new(),
        })
    }

    pub fn validate_for(&self, spec: &ModelSpec) -> Result<()> {
        if &self.spec != spec {
            return Err(Error::TopologyMismatch("plan was made for a different model spec".into()));
        }
        let layers: BTreeMap<LayerId, Vec<usize>> = spec.layers().into_iter().collect();
        for id in self.per_layer_rank.keys().chain(&self.full_layers) {
            if !layers.contains_key(id) || !id.is_conv_weight() {
                return Err(Error::TopologyMismatch(format!("{id} is not a conv weight of this model")));
            }
        }
        for id in &self.tunable_extras {
            if !layers.contains_key(id) || !id.is_extra() {
                return Err(Error::TopologyMismatch(format!("{id} is not a bias or norm tensor of this model")));
            }
        }
        if let Some(id) = self.full_layers.iter().find(|id| self.per_layer_rank.contains_key(id)) {
            return Err(Error::InvalidArgument(format!("{id} is both adapted and fully tuned")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write_file(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_slice(&checkpoint::read_file(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedCount {
    pub count: usize,
    pub total: usize,
    pub fraction: f64,
}

impl TunedCount {
    pub fn new(count: usize, total: usize) -> Self {
        TunedCount {
            count,
            total,
            fraction: count as f64 / total as f64,
        }
    }
}

/// `Σ r(d+k)` over adapted layers plus every directly tuned tensor.
pub fn tuned_param_count(plan: &RankPlan, spec: &ModelSpec) -> Result<TunedCount> {
    plan.validate_for(spec)?;
    let layers: BTreeMap<LayerId, Vec<usize>> = spec.layers().into_iter().collect();
    let mut count = 0;
    for (id, &r) in &plan.per_layer_rank {
        let (d, k) = matrix_dims(&layers[id]);
        count += r * (d + k);
    }
    for id in plan.tunable_extras.iter().chain(&plan.full_layers) {
        count += layers[id].iter().product::<usize>();
    }
    Ok(TunedCount::new(count, spec.param_count()))
}

/// Low-rank factors of one conv weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T: Real = f32> {
    /// `[r, k]`
    pub a: Tensor<T>,
    /// `[d, r]`
    pub b: Tensor<T>,
}

impl<T: Real> LoraPair<T> {
    /// `B·A` reshaped to the conv weight shape.
    pub fn delta(&self, shape: &[usize]) -> Result<Tensor<T>> {
        self.b.matmul(&self.a)?.reshape(shape)
    }
}

/// Trainable state of an adapted model; the base checkpoint stays untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T: Real = f32> {
    pub plan: RankPlan,
    pub pairs: BTreeMap<LayerId, LoraPair<T>>,
    /// Trainable copies of tunable extras and fully tuned conv weights.
    pub tuned: BTreeMap<LayerId, Tensor<T>>,
    /// SHA-256 over the base parameters the adapters were attached to.
    pub base_fingerprint: String,
    pub seed: u64,
}

/// Type-independent digest of checkpoint parameters (values widened to 64-bit).
pub fn fingerprint<T: Real>(ckpt: &Checkpoint<T>) -> String {
    let mut h = Sha256::new();
    for (id, t) in &ckpt.params {
        h.update(id.to_string().as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const A_SUFFIX: &str = ".lora_a";
const B_SUFFIX: &str = ".lora_b";

impl<T: Real> AdapterSet<T> {
    /// Zero-initialized `B`, uniform `±1/√k` `A`, extras copied from `base`.
    pub fn attach(base: &Checkpoint<T>, plan: &RankPlan, seed: u64) -> Result<Self> {
        base.validate()?;
        plan.validate_for(&base.spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = BTreeMap::new();
        for (id, &r) in &plan.per_layer_rank {
            if r == 0 {
                continue;
            }
            let (d, k) = matrix_dims(base.params[id].shape());
            let bound = 1.0 / (k as f64).sqrt();
            let a = Tensor::from_fn(&[r, k], |_| T::of(rng.random_range(-bound..bound)));
            pairs.insert(*id, LoraPair { a, b: Tensor::zeros(&[d, r]) });
        }
        let tuned = plan
            .tunable_extras
            .iter()
            .chain(&plan.full_layers)
            .map(|id| (*id, base.params[id].clone()))
            .collect();
        Ok(AdapterSet {
            plan: plan.clone(),
            pairs,
            tuned,
            base_fingerprint: fingerprint(base),
            seed,
        })
    }

    pub fn check_base(&self, base: &Checkpoint<T>) -> Result<()> {
        self.plan.validate_for(&base.spec)?;
        if fingerprint(base) != self.base_fingerprint {
            return Err(Error::TopologyMismatch("adapters were attached to a different base checkpoint".into()));
        }
        for (id, p) in &self.pairs {
            let w = base
                .params
                .get(id)
                .ok_or_else(|| Error::TopologyMismatch(format!("base lacks {id}")))?;
            let (d, k) = matrix_dims(w.shape());
            let r = p.a.dim(0);
            if p.a.shape() != [r, k] || p.b.shape() != [d, r] {
                return Err(Error::shape(
                    "adapter",
                    format!("{id}: A {:?}, B {:?} do not factor a {d}x{k} weight", p.a.shape(), p.b.shape()),
                ));
            }
        }
        for (id, t) in &self.tuned {
            match base.params.get(id) {
                Some(w) if w.shape() == t.shape() => {}
                _ => return Err(Error::shape("adapter", format!("{id} does not match the base"))),
            }
        }
        Ok(())
    }

    pub fn tuned_count(&self) -> Result<TunedCount> {
        tuned_param_count(&self.plan, &self.plan.spec)
    }

    /// Graph-parameter names of every trainable tensor, paired with the tensor.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (id, p) in self.pairs.iter_mut() {
            out.push((format!("{id}{A_SUFFIX}"), &mut p.a));
            out.push((format!("{id}{B_SUFFIX}"), &mut p.b));
        }
        for (id, t) in self.tuned.iter_mut() {
            out.push((id.to_string(), t));
        }
        out
    }

    pub fn forward(&self, base: &Checkpoint<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
        adapted_forward(base, self, img)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut fields = Map::new();
        fields.insert("plan".into(), serde_json::to_value(&self.plan)?);
        fields.insert("base_fingerprint".into(), Value::from(self.base_fingerprint.clone()));
        fields.insert("seed".into(), Value::from(self.seed));
        let mut named: Vec<(String, &Tensor<T>)> = Vec::new();
        for (id, p) in &self.pairs {
            named.push((format!("{id}{A_SUFFIX}"), &p.a));
            named.push((format!("{id}{B_SUFFIX}"), &p.b));
        }
        named.extend(self.tuned.iter().map(|(id, t)| (id.to_string(), t)));
        checkpoint::encode_container("adapters", fields, &named)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (mut header, tensors) = checkpoint::decode_container::<T>(bytes, "adapters")?;
        let plan: RankPlan =
            serde_json::from_value(header.remove("plan").ok_or("missing plan")?).map_err(|e| e.to_string())?;
        let base_fingerprint = header
            .remove("base_fingerprint")
            .and_then(|v| v.as_str().map(str::to_owned))
            .ok_or("missing base fingerprint")?;
        let seed = header.get("seed").and_then(Value::as_u64).unwrap_or_default();
        let mut a_parts = BTreeMap::new();
        let mut b_parts = BTreeMap::new();
        let mut tuned = BTreeMap::new();
        for (name, t) in tensors {
            let parse = |s: &str| s.parse::<LayerId>().map_err(|e| e.to_string());
            if let Some(id) = name.strip_suffix(A_SUFFIX) {
                a_parts.insert(parse(id)?, t);
            } else if let Some(id) = name.strip_suffix(B_SUFFIX) {
                b_parts.insert(parse(id)?, t);
            } else {
                tuned.insert(parse(&name)?, t);
            }
        }
        let mut pairs = BTreeMap::new();
        for (id, a) in a_parts {
            let b = b_parts.remove(&id).ok_or_else(|| format!("{id} has A but no B"))?;
            pairs.insert(id, LoraPair { a, b });
        }
        if let Some(id) = b_parts.keys().next() {
            return Err(format!("{id} has B but no A"));
        }
        plan.validate_for(&plan.spec).map_err(|e| e.to_string())?;
        let expected: BTreeSet<LayerId> = plan.per_layer_rank.iter().filter(|(_, &r)| r > 0).map(|(id, _)| *id).collect();
        if pairs.keys().copied().collect::<BTreeSet<_>>() != expected {
            return Err("adapter tensors do not match the plan".into());
        }
        let expected: BTreeSet<LayerId> = plan.tunable_extras.union(&plan.full_layers).copied().collect();
        if tuned.keys().copied().collect::<BTreeSet<_>>() != expected {
            return Err("tuned tensors do not match the plan".into());
        }
        Ok(AdapterSet {
            plan,
            pairs,
            tuned,
            base_fingerprint,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&checkpoint::read_file(path)?).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Binds `W₀ + reshape(B·A)` for adapted layers, adapter copies for tuned
/// tensors, and frozen base values for everything else.
pub struct AdapterBinder<'a, T: Real> {
    pub base: &'a Checkpoint<T>,
    pub adapters: &'a AdapterSet<T>,
    /// Register adapter tensors as graph parameters (for training).
    pub trainable: bool,
}

impl<T: Real> AdapterBinder<'_, T> {
    fn leaf(&self, g: &mut Graph<T>, name: String, t: &Tensor<T>) -> Result<NodeId> {
        if self.trainable {
            g.param(name, t.clone())
        } else {
            Ok(g.constant(t.clone()))
        }
    }
}

impl<T: Real> Binder<T> for AdapterBinder<'_, T> {
    fn bind(&mut self, g: &mut Graph<T>, id: &LayerId) -> Result<NodeId> {
        let w0 = self
            .base
            .params
            .get(id)
            .ok_or_else(|| Error::TopologyMismatch(format!("missing parameter {id}")))?;
        if let Some(t) = self.adapters.tuned.get(id) {
            return self.leaf(g, id.to_string(), t);
        }
        let Some(p) = self.adapters.pairs.get(id) else {
            return Ok(g.constant(w0.clone()));
        };
        let base = g.constant(w0.clone());
        let a = self.leaf(g, format!("{id}{A_SUFFIX}"), &p.a)?;
        let b = self.leaf(g, format!("{id}{B_SUFFIX}"), &p.b)?;
        let ba = g.matmul(b, a)?;
        let delta = g.reshape(ba, w0.shape())?;
        g.add(base, delta)
    }
}

/// Inference through the frozen base plus adapters.
pub fn adapted_forward<T: Real>(base: &Checkpoint<T>, adapters: &AdapterSet<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    adapters.check_base(base)?;
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let mut binder = AdapterBinder {
        base,
        adapters,
        trainable: false,
    };
    let y = net::forward_graph(&base.spec, &mut g, &mut binder, x)?;
    Ok(g.value(y).clone())
}

/// Folds the adapters into a plain checkpoint of the same size as `base`.
pub fn merge<T: Real>(base: &Checkpoint<T>, adapters: &AdapterSet<T>) -> Result<Checkpoint<T>> {
    adapters.check_base(base)?;
    let mut out = base.clone();
    for (id, p) in &adapters.pairs {
        let w = out.params.get_mut(id).expect("checked against base");
        *w = w.add(&p.delta(w.shape())?)?;
    }
    for (id, t) in &adapters.tuned {
        out.params.insert(*id, t.clone());
    }
    Ok(out)
}
