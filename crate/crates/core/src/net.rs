//! Miniature U-shaped restoration network with stage-labelled parameters.
//!
//! ```text
//! x ─ intro ─ enc.1 ─┬─ down ─ enc.2 ─┬─ down ─ middle ─ up ─(+)─ dec.1 ─ up ─(+)─ dec.2 ─ end ─(+)─ y
//!                    │                └──────────────────────┘                │           │
//!                    └────────────────────────────────────────────────────────┘           x
//! ```
//!
//! Every residual block is `x + proj(gate(conv3x3(norm(x))))`, where the 3×3
//! conv doubles the channels and the gate multiplies the two halves back down.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-6;

/// Network topology.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub width: usize,
    pub enc_blocks: Vec<usize>,
    pub middle_blocks: usize,
    pub dec_blocks: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            width: 8,
            enc_blocks: vec![1, 1],
            middle_blocks: 2,
            dec_blocks: vec![1, 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Intro,
    Enc(usize),
    Middle,
    Dec(usize),
    End,
}

impl Stage {
    /// Intro and end are excluded from score normalization and rank planning.
    pub fn is_boundary(self) -> bool {
        matches!(self, Stage::Intro | Stage::End)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Intro => "intro".to_string(),
            Stage::Enc(s) => format!("enc.{s}"),
            Stage::Middle => "middle".to_string(),
            Stage::Dec(s) => format!("dec.{s}"),
            Stage::End => "end".to_string(),
        };
        f.pad(&name)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad stage {s:?}"));
        Ok(match s {
            "intro" => Stage::Intro,
            "middle" => Stage::Middle,
            "end" => Stage::End,
            _ => {
                let (head, idx) = s.split_once('.').ok_or_else(bad)?;
                let idx: usize = idx.parse().map_err(|_| bad())?;
                match head {
                    "enc" => Stage::Enc(idx),
                    "dec" => Stage::Dec(idx),
                    _ => return Err(bad()),
                }
            }
        })
    }
}

/// Position inside a stage: the upsampling projection, a numbered block, or the downsampling conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unit {
    Up,
    Index(usize),
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    NormGamma,
    NormBeta,
    ConvWeight,
    ConvBias,
    ProjWeight,
    ProjBias,
}

impl Role {
    const NAMES: [(Role, &'static str); 6] = [
        (Role::NormGamma, "norm_gamma"),
        (Role::NormBeta, "norm_beta"),
        (Role::ConvWeight, "conv_weight"),
        (Role::ConvBias, "conv_bias"),
        (Role::ProjWeight, "proj_weight"),
        (Role::ProjBias, "proj_bias"),
    ];

    pub fn is_conv_weight(self) -> bool {
        matches!(self, Role::ConvWeight | Role::ProjWeight)
    }

    pub fn is_bias(self) -> bool {
        matches!(self, Role::ConvBias | Role::ProjBias)
    }

    pub fn is_norm(self) -> bool {
        matches!(self, Role::NormGamma | Role::NormBeta)
    }

    fn name(self) -> &'static str {
        Role::NAMES.iter().find(|(r, _)| *r == self).expect("all roles named").1
    }
}

/// `stage.unit.role`, e.g. `enc.1.0.conv_weight` or `dec.2.up.conv_weight`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub stage: Stage,
    pub unit: Unit,
    pub role: Role,
}

impl LayerId {
    pub fn new(stage: Stage, unit: Unit, role: Role) -> Self {
        LayerId { stage, unit, role }
    }

    /// Weight decay and rank planning apply to conv weights only.
    pub fn is_conv_weight(&self) -> bool {
        self.role.is_conv_weight()
    }

    /// Bias, normalization gain, or normalization shift.
    pub fn is_extra(&self) -> bool {
        !self.role.is_conv_weight()
    }

    /// The bias that pairs with this conv weight.
    pub fn bias(&self) -> LayerId {
        let role = match self.role {
            Role::ConvWeight => Role::ConvBias,
            Role::ProjWeight => Role::ProjBias,
            other => other,
        };
        LayerId { role, ..*self }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = match self.unit {
            Unit::Up => "up".to_string(),
            Unit::Down => "down".to_string(),
            Unit::Index(i) => i.to_string(),
        };
        write!(f, "{}.{}.{}", self.stage, unit, self.role.name())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad layer id {s:?}"));
        let (rest, role) = s.rsplit_once('.').ok_or_else(bad)?;
        let (stage, unit) = rest.rsplit_once('.').ok_or_else(bad)?;
        let role = Role::NAMES
            .iter()
            .find(|(_, n)| *n == role)
            .map(|(r, _)| *r)
            .ok_or_else(bad)?;
        let unit = match unit {
            "up" => Unit::Up,
            "down" => Unit::Down,
            n => Unit::Index(n.parse().map_err(|_| bad())?),
        };
        Ok(LayerId {
            stage: stage.parse()?,
            unit,
            role,
        })
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for Stage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 {
            return Err(Error::InvalidArgument("width must be >= 2".into()));
        }
        if self.enc_blocks.len() != self.dec_blocks.len() {
            return Err(Error::InvalidArgument(
                "encoder and decoder must have the same number of stages".into(),
            ));
        }
        if self.middle_blocks < 1
            || self.enc_blocks.iter().chain(&self.dec_blocks).any(|&b| b < 1)
        {
            return Err(Error::InvalidArgument("every block count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.enc_blocks.len()
    }

    /// Spatial size must be a multiple of this.
    pub fn downsampling(&self) -> usize {
        1 << self.depth()
    }

    /// Channels inside encoder stage `s` (1-based) before its downsampling.
    fn enc_channels(&self, s: usize) -> usize {
        self.width << (s - 1)
    }

    /// Channels inside decoder stage `s` (1-based, deepest first).
    fn dec_channels(&self, s: usize) -> usize {
        self.width << (self.depth() - s)
    }

    /// Every parameter tensor with its shape, in canonical order.
    pub fn layers(&self) -> Vec<(LayerId, Vec<usize>)> {
        type Layers = Vec<(LayerId, Vec<usize>)>;
        fn conv(out: &mut Layers, stage: Stage, unit: Unit, cout: usize, cin: usize, k: usize, weight: Role) {
            let id = LayerId::new(stage, unit, weight);
            out.push((id, vec![cout, cin, k, k]));
            out.push((id.bias(), vec![cout]));
        }
        let mut out = Layers::new();
        conv(&mut out, Stage::Intro, Unit::Index(0), self.width, 3, 3, Role::ConvWeight);
        let mut blocks = Vec::new();
        for s in 1..=self.depth() {
            let c = self.enc_channels(s);
            for b in 0..self.enc_blocks[s - 1] {
                blocks.push((Stage::Enc(s), b, c));
            }
            blocks.push((Stage::Enc(s), usize::MAX, c));
        }
        for b in 0..self.middle_blocks {
            blocks.push((Stage::Middle, b, self.width << self.depth()));
        }
        for s in 1..=self.depth() {
            let c = self.dec_channels(s);
            blocks.push((Stage::Dec(s), usize::MAX, c));
            for b in 0..self.dec_blocks[s - 1] {
                blocks.push((Stage::Dec(s), b, c));
            }
        }
        for (stage, b, c) in blocks {
            match (stage, b) {
                (Stage::Enc(_), usize::MAX) => conv(&mut out, stage, Unit::Down, 2 * c, c, 3, Role::ConvWeight),
                (Stage::Dec(_), usize::MAX) => conv(&mut out, stage, Unit::Up, c, 2 * c, 1, Role::ConvWeight),
                _ => {
                    let unit = Unit::Index(b);
                    out.push((LayerId::new(stage, unit, Role::NormGamma), vec![c]));
                    out.push((LayerId::new(stage, unit, Role::NormBeta), vec![c]));
                    conv(&mut out, stage, unit, 2 * c, c, 3, Role::ConvWeight);
                    conv(&mut out, stage, unit, c, c, 1, Role::ProjWeight);
                }
            }
        }
        conv(&mut out, Stage::End, Unit::Index(0), 3, self.width, 3, Role::ConvWeight);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Stages in forward order: intro, enc.1.., middle, dec.1.., end.
    pub fn stages(&self) -> Vec<Stage> {
        let mut s = vec![Stage::Intro];
        s.extend((1..=self.depth()).map(Stage::Enc));
        s.push(Stage::Middle);
        s.extend((1..=self.depth()).map(Stage::Dec));
        s.push(Stage::End);
        s
    }

    /// Every layer assigned to exactly one stage.
    pub fn stage_partition(&self) -> BTreeMap<Stage, Vec<LayerId>> {
        let mut out: BTreeMap<Stage, Vec<LayerId>> =
            self.stages().into_iter().map(|s| (s, Vec::new())).collect();
        for (id, _) in self.layers() {
            out.get_mut(&id.stage).expect("stage listed").push(id);
        }
        out
    }
}

/// Decides how each parameter enters a graph: as a trainable leaf, a constant,
/// or a composite such as a frozen weight plus a low-rank update.
pub trait Binder<T: Real> {
    fn bind(&mut self, g: &mut Graph<T>, id: &LayerId) -> Result<NodeId>;
}

/// Binds checkpoint tensors directly; `trainable` selects which become graph parameters.
pub struct ParamBinder<'a, T: Real> {
    pub params: &'a BTreeMap<LayerId, Tensor<T>>,
    pub trainable: &'a dyn Fn(&LayerId) -> bool,
}

impl<T: Real> Binder<T> for ParamBinder<'_, T> {
    fn bind(&mut self, g: &mut Graph<T>, id: &LayerId) -> Result<NodeId> {
        let t = self
            .params
            .get(id)
            .ok_or_else(|| Error::TopologyMismatch(format!("missing parameter {id}")))?
            .clone();
        if (self.trainable)(id) {
            g.param(id.to_string(), t)
        } else {
            Ok(g.constant(t))
        }
    }
}

fn conv_layer<T: Real>(
    g: &mut Graph<T>,
    b: &mut dyn Binder<T>,
    x: NodeId,
    weight: LayerId,
    stride: usize,
) -> Result<NodeId> {
    let w = b.bind(g, &weight)?;
    let bias = b.bind(g, &weight.bias())?;
    let k = g.value(w).dim(2);
    g.conv2d(x, w, bias, stride, (k - 1) / 2)
}

fn res_block<T: Real>(g: &mut Graph<T>, b: &mut dyn Binder<T>, x: NodeId, stage: Stage, idx: usize) -> Result<NodeId> {
    let unit = Unit::Index(idx);
    let gamma = b.bind(g, &LayerId::new(stage, unit, Role::NormGamma))?;
    let beta = b.bind(g, &LayerId::new(stage, unit, Role::NormBeta))?;
    let h = g.layer_norm(x, gamma, beta, NORM_EPS)?;
    let h = conv_layer(g, b, h, LayerId::new(stage, unit, Role::ConvWeight), 1)?;
    let h = g.gate(h)?;
    let h = conv_layer(g, b, h, LayerId::new(stage, unit, Role::ProjWeight), 1)?;
    g.add(x, h)
}

/// Records the forward pass for `input` (`[N,3,H,W]`) and returns the output node.
pub fn forward_graph<T: Real>(
    spec: &ModelSpec,
    g: &mut Graph<T>,
    b: &mut dyn Binder<T>,
    input: NodeId,
) -> Result<NodeId> {
    let shape = g.value(input).shape().to_vec();
    let factor = spec.downsampling();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("forward", format!("expected [N,3,H,W], got {shape:?}")));
    }
    if shape[2] % factor != 0 || shape[3] % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "spatial size {}x{} not divisible by {factor}",
            shape[2], shape[3]
        )));
    }
    let first = LayerId::new(Stage::Intro, Unit::Index(0), Role::ConvWeight);
    let mut x = conv_layer(g, b, input, first, 1)?;
    let mut skips = Vec::with_capacity(spec.depth());
    for s in 1..=spec.depth() {
        for i in 0..spec.enc_blocks[s - 1] {
            x = res_block(g, b, x, Stage::Enc(s), i)?;
        }
        skips.push(x);
        x = conv_layer(g, b, x, LayerId::new(Stage::Enc(s), Unit::Down, Role::ConvWeight), 2)?;
    }
    for i in 0..spec.middle_blocks {
        x = res_block(g, b, x, Stage::Middle, i)?;
    }
    for s in 1..=spec.depth() {
        x = g.upsample2x(x)?;
        x = conv_layer(g, b, x, LayerId::new(Stage::Dec(s), Unit::Up, Role::ConvWeight), 1)?;
        x = g.add(x, skips.pop().expect("one skip per stage"))?;
        for i in 0..spec.dec_blocks[s - 1] {
            x = res_block(g, b, x, Stage::Dec(s), i)?;
        }
    }
    let last = LayerId::new(Stage::End, Unit::Index(0), Role::ConvWeight);
    let x = conv_layer(g, b, x, last, 1)?;
    g.add(input, x)
}

/// Freshly initialized parameters: Kaiming-uniform conv weights (`±1/√fan_in`), zero biases,
/// unit gain and zero shift for the normalizations.
pub fn init_params<T: Real>(spec: &ModelSpec, seed: u64) -> Result<BTreeMap<LayerId, Tensor<T>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(spec
        .layers()
        .into_iter()
        .map(|(id, shape)| {
            let t = match id.role {
                Role::ConvWeight | Role::ProjWeight => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)))
                }
                Role::NormGamma => Tensor::ones(&shape),
                Role::ConvBias | Role::ProjBias | Role::NormBeta => Tensor::zeros(&shape),
            };
            (id, t)
        })
        .collect())
}
