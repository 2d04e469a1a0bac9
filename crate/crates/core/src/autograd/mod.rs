//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operator application in creation order, which is
//! already a topological order. Leaves are either constants or named
//! parameters; [`Graph::backprop`] returns one gradient per parameter name.

pub mod kernels;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use kernels::MSE_FLOOR;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Parameter name → gradient.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: kernels::NormStats<T>,
    },
    Gate(NodeId),
    Upsample2x(NodeId),
    PsnrLoss {
        pred: NodeId,
        target: Tensor<T>,
        groups: usize,
    },
    L1Loss {
        pred: NodeId,
        target: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    param: Option<String>,
    needs_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<NodeId> {
        let value = value.check_finite(name)?;
        let needs_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            param: None,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::Gate(a) | Op::Upsample2x(a) => {
                vec![a]
            }
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![input, kernel, bias],
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::PsnrLoss { pred, .. } | Op::L1Loss { pred, .. } => vec![pred],
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param: None,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A named leaf whose gradient is reported by [`Graph::backprop`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<NodeId> {
        let name = name.into();
        if self.nodes.iter().any(|n| n.param.as_deref() == Some(name.as_str())) {
            return Err(Error::InvalidArgument(format!("parameter {name} registered twice")));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param: Some(name),
            needs_grad: true,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v, "scale")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, "sum")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), v, "reshape")
    }

    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]` plus a per-channel bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let v = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            v,
            "conv2d",
        )
    }

    /// Normalizes over channels at each spatial location, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (v, stats) =
            kernels::layer_norm_forward(self.value(input), self.value(gamma), self.value(beta), eps)?;
        self.push(
            Op::LayerNorm {
                input,
                gamma,
                beta,
                stats,
            },
            v,
            "layer_norm",
        )
    }

    /// First half of the channels times the second half.
    pub fn gate(&mut self, input: NodeId) -> Result<NodeId> {
        let v = kernels::gate_forward(self.value(input))?;
        self.push(Op::Gate(input), v, "gate")
    }

    pub fn upsample2x(&mut self, input: NodeId) -> Result<NodeId> {
        let v = kernels::upsample2x_forward(self.value(input))?;
        self.push(Op::Upsample2x(input), v, "upsample2x")
    }

    /// `-PSNR(pred, target)` over the whole tensor.
    pub fn loss_psnr(&mut self, pred: NodeId, target: &Tensor<T>, max_val: f64) -> Result<NodeId> {
        self.loss_psnr_grouped(pred, target, max_val, 1)
    }

    /// Mean of `-PSNR` over `groups` equal slices of the leading axis (one per image).
    pub fn loss_psnr_grouped(
        &mut self,
        pred: NodeId,
        target: &Tensor<T>,
        max_val: f64,
        groups: usize,
    ) -> Result<NodeId> {
        let v = kernels::psnr_loss_forward(self.value(pred), target, max_val, groups)?;
        self.push(
            Op::PsnrLoss {
                pred,
                target: target.clone(),
                groups,
            },
            Tensor::scalar(v),
            "loss_psnr",
        )
    }

    /// Mean absolute error.
    pub fn loss_l1(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let v = kernels::l1_loss_forward(self.value(pred), target)?;
        self.push(
            Op::L1Loss {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(v),
            "loss_l1",
        )
    }

    /// Gradient of the scalar `loss` with respect to every registered parameter.
    ///
    /// Parameters the loss does not depend on get a zero gradient.
    pub fn backprop(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backprop",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(&node.op, &g)?;
            for (input, d) in contributions {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                accumulate(&mut grads[input.0], d)?;
            }
            if node.param.is_some() {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g.check_finite("backprop")?);
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn local_grads(&self, op: &Op<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.zip_map(vb, |x, y| x * y)?),
                    (*b, g.zip_map(va, |x, y| x * y)?),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.item()))],
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    crate::tensor::gemm(
                        crate::tensor::Mat::new(g.data(), m, n),
                        crate::tensor::Mat::t(vb.data(), n, k),
                        T::zero(),
                        &mut da,
                    );
                    out.push((*a, Tensor::new(&[m, k], da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    crate::tensor::gemm(
                        crate::tensor::Mat::t(va.data(), k, m),
                        crate::tensor::Mat::new(g.data(), m, n),
                        T::zero(),
                        &mut db,
                    );
                    out.push((*b, Tensor::new(&[k, n], db)?));
                }
                out
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.value(*a).shape())?)],
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (d_in, d_k, d_b) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    self.value(*bias),
                    *stride,
                    *padding,
                    g,
                    self.wants(*input),
                )?;
                let mut out = vec![(*kernel, d_k), (*bias, d_b)];
                if let Some(d) = d_in {
                    out.push((*input, d));
                }
                out
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) =
                    kernels::layer_norm_backward(self.value(*input), self.value(*gamma), stats, g)?;
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Gate(a) => vec![(*a, kernels::gate_backward(self.value(*a), g)?)],
            Op::Upsample2x(a) => vec![(*a, kernels::upsample2x_backward(self.value(*a), g)?)],
            Op::PsnrLoss {
                pred,
                target,
                groups,
            } => vec![(
                *pred,
                kernels::psnr_loss_backward(self.value(*pred), target, *groups, g.item())?,
            )],
            Op::L1Loss { pred, target } => vec![(
                *pred,
                kernels::l1_loss_backward(self.value(*pred), target, g.item()),
            )],
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, d: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(d),
        Some(acc) => {
            acc.expect_same_shape(&d, "backprop")?;
            for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                *a = *a + *b;
            }
        }
    }
    Ok(())
}

/// Central-difference gradient of `f` with respect to every element of `params`.
pub fn finite_diff_grad<T, F>(mut f: F, params: &BTreeMap<String, Tensor<T>>, h: f64) -> Result<Gradients<T>>
where
    T: Real,
    F: FnMut(&BTreeMap<String, Tensor<T>>) -> Result<T>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite difference step must be > 0".into()));
    }
    let mut probe = params.clone();
    let mut out = Gradients::new();
    for (name, value) in params {
        let mut grad = Tensor::zeros(value.shape());
        for i in 0..value.numel() {
            let orig = value.data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig + T::of(h);
            let plus = f(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig - T::of(h);
            let minus = f(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / T::of(2.0 * h);
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

/// `max|a−b| / max(max|a|, max|b|)`, zero when both tensors vanish.
pub fn relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let diff = a.max_abs_diff(b)?.f64();
    let scale = a.max_abs().max(b.max_abs()).f64();
    Ok(if scale == 0.0 { diff } else { diff / scale })
}
