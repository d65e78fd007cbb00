use crate::autodiff::NodeId;
use crate::equalizer::GlobalStats;
use crate::error::{Error, Result};
use crate::ops::UpsampleMode;
use crate::partition::ChannelPartition;

use super::{ConvUnitBlock, Graph};

/// `Z = h([UP_r1(P1); ...; UP_rn(Pn)])`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSpec {
    pub ratios: Vec<f64>,
    pub channels: Vec<usize>,
    pub block: ConvUnitBlock,
    pub mode: UpsampleMode,
}

impl FusionSpec {
    pub fn new(ratios: Vec<f64>, channels: Vec<usize>, block: ConvUnitBlock, mode: UpsampleMode) -> Result<Self> {
        if ratios.is_empty() || ratios.len() != channels.len() {
            return Err(Error::Contract(format!(
                "{} ratios for {} branches",
                ratios.len(),
                channels.len()
            )));
        }
        if ratios.iter().any(|&r| !(r >= 1.0 && r.is_finite())) {
            return Err(Error::Contract(format!("ratios must be >= 1, got {ratios:?}")));
        }
        if !ratios.contains(&1.0) {
            return Err(Error::Contract(format!("no branch with ratio 1 in {ratios:?}")));
        }
        let total: usize = channels.iter().sum();
        if block.in_c != total {
            return Err(Error::ShapeMismatch(format!(
                "fusion block takes {} channels, branches give {total}",
                block.in_c
            )));
        }
        Ok(Self { ratios, channels, block, mode })
    }

    pub fn branches(&self) -> usize {
        self.ratios.len()
    }

    /// Input-channel groups of the fusion weight, one per branch.
    pub fn partition(&self) -> ChannelPartition {
        ChannelPartition::from_sizes(&self.channels)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub enum Equalization<'a> {
    #[default]
    Off,
    /// `(x - mu_i) / sigma_i` on every branch after upsampling.
    Injected(&'a GlobalStats),
}

#[derive(Clone, Debug)]
pub struct FuseOutput {
    /// Branch tensors after upsampling, before any equalizer.
    pub subjects: Vec<NodeId>,
    /// What was concatenated.
    pub inputs: Vec<NodeId>,
    pub concat: NodeId,
    pub pre_bn: NodeId,
    pub output: NodeId,
}

pub fn fuse(g: &mut Graph, branches: &[NodeId], spec: &FusionSpec, eq: Equalization) -> Result<FuseOutput> {
    if branches.len() != spec.branches() {
        return Err(Error::Contract(format!(
            "{} branch tensors for {} branches",
            branches.len(),
            spec.branches()
        )));
    }
    if let Equalization::Injected(stats) = eq {
        if stats.len() != spec.branches() {
            return Err(Error::Contract(format!(
                "stats cover {} branches, fusion has {}",
                stats.len(),
                spec.branches()
            )));
        }
    }
    // width follows the reference branch so non-square maps fuse too
    let reference = spec.ratios.iter().position(|&r| r == 1.0).expect("validated");
    let rs = g.tape.value(branches[reference]).shape();
    let mut subjects = Vec::with_capacity(branches.len());
    for (i, (&b, &r)) in branches.iter().zip(&spec.ratios).enumerate() {
        let s = g.tape.value(b).shape();
        if s.c != spec.channels[i] {
            return Err(Error::ShapeMismatch(format!(
                "branch {i} has {} channels, expected {}",
                s.c, spec.channels[i]
            )));
        }
        let h = (s.h as f64 * r).round() as usize;
        if h != rs.h || (r == 1.0 && s.w != rs.w) {
            return Err(Error::ShapeMismatch(format!(
                "branch {i} ({}x{} at ratio {r}) does not reach {}x{}",
                s.h, s.w, rs.h, rs.w
            )));
        }
        subjects.push(g.tape.upsample_to(b, rs.h, rs.w, spec.mode)?);
    }
    let inputs = match eq {
        Equalization::Off => subjects.clone(),
        Equalization::Injected(stats) => subjects
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let (mu, sigma) = stats.branch(i)?;
                Ok(g.tape.affine(x, 1.0 / sigma, -mu / sigma))
            })
            .collect::<Result<_>>()?,
    };
    let concat = g.tape.concat(&inputs)?;
    let pre_bn = spec.block.conv(g, concat)?;
    let output = spec.block.finish(g, pre_bn)?;
    Ok(FuseOutput { subjects, inputs, concat, pre_bn, output })
}
