//! Define-by-run reverse-mode differentiation over the operator set in
//! [`crate::ops`]. A [`Tape`] records every forward result; [`Tape::backward`]
//! walks it once in reverse.

mod check;
pub mod gradcheck;

pub use check::{finite_diff_grad, grad_group_moments};

use std::ops::Index;

use crate::error::{Error, Result};
use crate::ops::{self, ConvParams, UpsampleMode};
use crate::tensor::{concat_channels, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a convolution recorded on the tape; the weight and bias are
/// separate nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvAttrs {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub pad_fill: Option<Vec<f64>>,
}

impl ConvAttrs {
    /// Stride 1, "same" padding for a `k x k` kernel.
    pub fn same(k: usize) -> Self {
        Self::new(k, 1, 1)
    }

    pub fn new(k: usize, stride: usize, dilation: usize) -> Self {
        Self { stride, dilation, padding: dilation * (k.max(1) - 1) / 2, groups: 1, pad_fill: None }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_pad_fill(mut self, fill: Vec<f64>) -> Self {
        self.pad_fill = Some(fill);
        self
    }

    pub fn params(&self, weight: Tensor, bias: Option<Vec<f64>>) -> ConvParams {
        ConvParams {
            weight,
            bias,
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
            groups: self.groups,
            pad_fill: self.pad_fill.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// Inputs: `[x, weight]` or `[x, weight, bias]`, bias shaped `(1, O, 1, 1)`.
    Conv2d(ConvAttrs),
    /// Inputs: `[x, gamma, beta]`; per-channel `(mean, inv_std)` of the batch.
    BatchNorm { stats: Vec<(f64, f64)> },
    /// Frozen statistics; forward only.
    BatchNormRunning,
    Relu,
    Upsample(UpsampleMode),
    Concat,
    Add,
    Mul,
    Affine { scale: f64, shift: f64 },
    AvgPoolTo,
    Sum,
    Mean,
    SumSquares,
    /// Mean pixel-wise cross-entropy; `probs` are the softmax outputs.
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d(_) => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::BatchNormRunning => "batchnorm(running)",
            Op::Relu => "relu",
            Op::Upsample(_) => "upsample",
            Op::Concat => "concat",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::AvgPoolTo => "avgpool",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumSquares => "sum_squares",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar_shape() -> Shape {
    Shape { n: 1, c: 1, h: 1, w: 1 }
}

fn per_channel(t: &Tensor, c: usize, what: &str) -> Result<()> {
    if t.numel() != c {
        return Err(Error::ShapeMismatch(format!("{what} has {} entries, need {c}", t.numel())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { id, op, inputs, value, requires_grad });
        id
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { id, op: Op::Leaf, inputs: vec![], value, requires_grad: false });
        id
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { id, op: Op::Leaf, inputs: vec![], value, requires_grad: true });
        id
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        attrs: &ConvAttrs,
    ) -> Result<NodeId> {
        let w = self.value(weight).clone();
        let b = match bias {
            Some(b) => {
                per_channel(self.value(b), w.shape().n, "conv bias")?;
                Some(self.value(b).data().to_vec())
            }
            None => None,
        };
        let y = ops::conv2d(self.value(x), &attrs.params(w, b))?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d(attrs.clone()), inputs, y))
    }

    /// Batch-statistics normalization; `gamma`, `beta` hold one entry per channel.
    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let c = self.value(x).shape().c;
        per_channel(self.value(gamma), c, "gamma")?;
        per_channel(self.value(beta), c, "beta")?;
        let mut p = ops::BatchNormParams::new(c);
        p.gamma = self.value(gamma).data().to_vec();
        p.beta = self.value(beta).data().to_vec();
        p.eps = eps;
        let stats = ops::normalization_stats(self.value(x), &p)?;
        let y = ops::batchnorm(self.value(x), &p)?;
        Ok(self.push(Op::BatchNorm { stats }, vec![x, gamma, beta], y))
    }

    /// Normalization with stored statistics. Not differentiable on this tape.
    pub fn batchnorm_running(&mut self, x: NodeId, p: &ops::BatchNormParams) -> Result<NodeId> {
        let mut p = p.clone();
        p.mode = ops::BnMode::RunningStats;
        let y = ops::batchnorm(self.value(x), &p)?;
        Ok(self.push(Op::BatchNormRunning, vec![x], y))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu(self.value(x));
        self.push(Op::Relu, vec![x], y)
    }

    pub fn upsample_to(&mut self, x: NodeId, h: usize, w: usize, mode: UpsampleMode) -> Result<NodeId> {
        let s = self.value(x).shape();
        if (s.h, s.w) == (h, w) {
            return Ok(x);
        }
        let y = ops::upsample_to(self.value(x), h, w, mode)?;
        Ok(self.push(Op::Upsample(mode), vec![x], y))
    }

    /// Like [`Tape::upsample_to`] but also shrinks.
    pub fn resize_to(&mut self, x: NodeId, h: usize, w: usize, mode: UpsampleMode) -> Result<NodeId> {
        let s = self.value(x).shape();
        if (s.h, s.w) == (h, w) {
            return Ok(x);
        }
        let y = ops::resize_to(self.value(x), h, w, mode)?;
        Ok(self.push(Op::Upsample(mode), vec![x], y))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<Tensor> = xs.iter().map(|&i| self.value(i).clone()).collect();
        let y = concat_channels(&parts)?;
        Ok(self.push(Op::Concat, xs.to_vec(), y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul, vec![a, b], y))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let y = ops::affine(self.value(x), scale, shift);
        self.push(Op::Affine { scale, shift }, vec![x], y)
    }

    pub fn avgpool_to(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let y = ops::avgpool_to(self.value(x), h, w)?;
        Ok(self.push(Op::AvgPoolTo, vec![x], y))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = Tensor::from_op(scalar_shape(), vec![v.sum()], v.dtype());
        self.push(Op::Sum, vec![x], y)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = Tensor::from_op(scalar_shape(), vec![v.sum() / v.numel() as f64], v.dtype());
        self.push(Op::Mean, vec![x], y)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = Tensor::from_op(scalar_shape(), vec![v.dot(v)], v.dtype());
        self.push(Op::SumSquares, vec![x], y)
    }

    /// Mean cross-entropy of `logits (N, K, H, W)` against one label per pixel,
    /// laid out `n * H * W + h * W + w`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        let s = z.shape();
        let pixels = s.n * s.plane();
        if labels.len() != pixels {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for logits {s}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
            return Err(Error::Contract(format!("label {bad} out of range for {} classes", s.c)));
        }
        let mut probs = vec![0.0; z.numel()];
        let mut loss = 0.0;
        let data = z.data();
        for n in 0..s.n {
            for p in 0..s.plane() {
                let at = |k: usize| (n * s.c + k) * s.plane() + p;
                let max = (0..s.c).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..s.c).map(|k| (data[at(k)] - max).exp()).sum();
                for k in 0..s.c {
                    probs[at(k)] = (data[at(k)] - max).exp() / denom;
                }
                let label = labels[n * s.plane() + p];
                loss += denom.ln() + max - data[at(label)];
            }
        }
        let y = Tensor::from_op(scalar_shape(), vec![loss / pixels as f64], z.dtype());
        let op = Op::SoftmaxCrossEntropy { labels: labels.to_vec(), probs };
        Ok(self.push(op, vec![logits], y))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("loss must be scalar, got {}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_op(lv.shape(), vec![1.0], lv.dtype()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let local = self.local_grads(node, &g)?;
            grads[i] = Some(g);
            for (input, dg) in node.inputs.iter().zip(local) {
                let Some(dg) = dg else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => ops::add(&acc, &dg)?,
                    None => dg,
                });
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.value.shape())))
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradient contributions of `node` to each of its inputs.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let scalar_g = || g.data()[0];
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d(attrs) => {
                let bias = (node.inputs.len() == 3).then(|| input(2).data().to_vec());
                let p = attrs.params(input(1).clone(), bias);
                let cg = ops::conv2d_backward(input(0), &p, g)?;
                let mut out = vec![Some(cg.input), Some(cg.weight)];
                if node.inputs.len() == 3 {
                    out.push(Some(Tensor::from_op(input(2).shape(), cg.bias, g.dtype())));
                }
                out
            }
            Op::BatchNorm { stats } => {
                let x = input(0);
                let s = x.shape();
                let gamma = input(1).data();
                let m = (s.n * s.plane()) as f64;
                let mut sum_g = vec![0.0; s.c];
                let mut sum_gx = vec![0.0; s.c];
                for (idx, (xp, gp)) in
                    x.data().chunks_exact(s.plane()).zip(g.data().chunks_exact(s.plane())).enumerate()
                {
                    let c = idx % s.c;
                    let (mean, inv) = stats[c];
                    for (&xv, &gv) in xp.iter().zip(gp) {
                        sum_g[c] += gv;
                        sum_gx[c] += gv * (xv - mean) * inv;
                    }
                }
                let dx = if wants(0) {
                    let mut dx = vec![0.0; x.numel()];
                    for (idx, ((dp, xp), gp)) in dx
                        .chunks_exact_mut(s.plane())
                        .zip(x.data().chunks_exact(s.plane()))
                        .zip(g.data().chunks_exact(s.plane()))
                        .enumerate()
                    {
                        let c = idx % s.c;
                        let (mean, inv) = stats[c];
                        let (mg, mgx) = (sum_g[c] / m, sum_gx[c] / m);
                        let k = gamma[c] * inv;
                        for ((d, &xv), &gv) in dp.iter_mut().zip(xp).zip(gp) {
                            *d = k * (gv - mg - (xv - mean) * inv * mgx);
                        }
                    }
                    Some(Tensor::from_op(s, dx, g.dtype()))
                } else {
                    None
                };
                let cs = input(1).shape();
                vec![
                    dx,
                    Some(Tensor::from_op(cs, sum_gx, g.dtype())),
                    Some(Tensor::from_op(input(2).shape(), sum_g, g.dtype())),
                ]
            }
            Op::BatchNormRunning => {
                return Err(Error::UnsupportedOp(
                    "batchnorm with running statistics has no backward".into(),
                ))
            }
            Op::Relu => {
                let data = input(0).data().iter().zip(g.data()).map(|(&x, &d)| if x > 0.0 { d } else { 0.0 });
                vec![Some(Tensor::from_op(g.shape(), data.collect(), g.dtype()))]
            }
            Op::Upsample(mode) => vec![Some(ops::upsample_adjoint(g, input(0).shape(), *mode))],
            Op::Concat => {
                let mut start = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let c = input(k).shape().c;
                    out.push(if wants(k) { Some(g.channels(start, c)?) } else { None });
                    start += c;
                }
                out
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul => vec![
                wants(0).then(|| ops::mul(g, input(1))).transpose()?,
                wants(1).then(|| ops::mul(g, input(0))).transpose()?,
            ],
            Op::Affine { scale, .. } => vec![Some(ops::affine(g, *scale, 0.0))],
            Op::AvgPoolTo => vec![Some(ops::avgpool_adjoint(g, input(0).shape()))],
            Op::Sum => vec![Some(Tensor::full(input(0).shape(), scalar_g()).cast(g.dtype()))],
            Op::Mean => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape(), scalar_g() / x.numel() as f64).cast(g.dtype()))]
            }
            Op::SumSquares => vec![Some(ops::affine(input(0), 2.0 * scalar_g(), 0.0))],
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let s = input(0).shape();
                let scale = scalar_g() / (s.n * s.plane()) as f64;
                let mut d = probs.clone();
                for n in 0..s.n {
                    for p in 0..s.plane() {
                        d[(n * s.c + labels[n * s.plane() + p]) * s.plane() + p] -= 1.0;
                    }
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::from_op(s, d, g.dtype()))]
            }
        })
    }
}

/// Dense gradient storage from [`Tape::backward`], one tensor per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.grads[id.0], Tensor::scalar(0.0))
    }
}

impl Index<NodeId> for Gradients {
    type Output = Tensor;

    fn index(&self, id: NodeId) -> &Tensor {
        self.get(id)
    }
}
