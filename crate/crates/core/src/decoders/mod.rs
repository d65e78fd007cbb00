//! Toy encoder and decoder heads assembled from [`crate::ops`] on a [`Tape`].
//!
//! Parameters live in a [`ParamStore`] keyed by name; a forward pass binds them
//! into a fresh [`Graph`], either as trainable leaves or as constants.

mod encoder;
mod fusion;
mod heads;

pub use encoder::ToyEncoder;
pub use fusion::{fuse, Equalization, FuseOutput, FusionSpec};
pub use heads::{HeadConfig, HeadForward, HeadKind, Segmenter};

use std::collections::BTreeMap;

use crate::autodiff::{ConvAttrs, NodeId, Tape};
use crate::error::{Error, Result};
use crate::ops::DEFAULT_EPS;
use crate::rng::{randn, Rng};
use crate::tensor::{Shape, Tensor};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// A tape plus the node ids of the parameters bound into it.
#[derive(Debug, Default)]
pub struct Graph {
    pub tape: Tape,
    params: BTreeMap<String, NodeId>,
}

impl Graph {
    /// Binds every parameter; those for which `trainable` is true become
    /// gradient-carrying leaves.
    pub fn bind(store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let mut tape = Tape::new();
        let params = store
            .iter()
            .map(|(name, t)| {
                let id = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.to_string(), id)
            })
            .collect();
        Self { tape, params }
    }

    pub fn param(&self, name: &str) -> Result<NodeId> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn channel_vector(c: usize, v: f64) -> Tensor {
    Tensor::full(Shape { n: 1, c, h: 1, w: 1 }, v)
}

/// `[Conv - BatchNorm - ReLU]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnitBlock {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub attrs: ConvAttrs,
    pub bias: bool,
}

impl ConvUnitBlock {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize) -> Self {
        Self { name: name.into(), in_c, out_c, k, attrs: ConvAttrs::same(k), bias: false }
    }

    pub fn with_attrs(mut self, attrs: ConvAttrs) -> Self {
        self.attrs = attrs;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape { n: self.out_c, c: self.in_c / self.attrs.groups, h: self.k, w: self.k }
    }

    /// He-normal (fan-in) weights, zero bias, unit BN scale, zero BN shift.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let ws = self.weight_shape();
        let fan_in = (ws.c * ws.h * ws.w) as f64;
        let mut rng = rng.named(&self.name);
        store.insert(self.weight_name(), randn(ws.dims(), 0.0, (2.0 / fan_in).sqrt(), &mut rng)?);
        if self.bias {
            store.insert(self.bias_name(), channel_vector(self.out_c, 0.0));
        }
        store.insert(format!("{}.gamma", self.name), channel_vector(self.out_c, 1.0));
        store.insert(format!("{}.beta", self.name), channel_vector(self.out_c, 0.0));
        Ok(())
    }

    /// Convolution only, before normalization.
    pub fn conv(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight_name())?;
        let b = if self.bias { Some(g.param(&self.bias_name())?) } else { None };
        g.tape.conv2d(x, w, b, &self.attrs)
    }

    /// Normalization and activation applied to a convolution output.
    pub fn finish(&self, g: &mut Graph, y: NodeId) -> Result<NodeId> {
        let gamma = g.param(&format!("{}.gamma", self.name))?;
        let beta = g.param(&format!("{}.beta", self.name))?;
        let y = g.tape.batchnorm(y, gamma, beta, DEFAULT_EPS)?;
        Ok(g.tape.relu(y))
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let y = self.conv(g, x)?;
        self.finish(g, y)
    }
}

/// Plain 1x1 classifier convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub name: String,
    pub in_c: usize,
    pub classes: usize,
}

impl Classifier {
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let mut rng = rng.named(&self.name);
        let std = (1.0 / self.in_c as f64).sqrt();
        store.insert(format!("{}.weight", self.name), randn([self.classes, self.in_c, 1, 1], 0.0, std, &mut rng)?);
        store.insert(format!("{}.bias", self.name), channel_vector(self.classes, 0.0));
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&format!("{}.weight", self.name))?;
        let b = g.param(&format!("{}.bias", self.name))?;
        g.tape.conv2d(x, w, Some(b), &ConvAttrs::same(1))
    }
}
