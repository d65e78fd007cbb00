//! Gradient-scale probe for fusion weights.
//!
//! The loss is the sum of one pre-activation per output channel, at a random
//! position. Its gradient with respect to the fusion weight has row `o` equal
//! to the input patch under channel `o`'s position, so the per-branch gradient
//! spread reflects the subjects' scales and nothing downstream.

use crate::autodiff::{grad_group_moments, NodeId, Tape};
use crate::error::Result;
use crate::partition::ChannelPartition;
use crate::rng::Rng;
use crate::stats::Moments;
use crate::tensor::Tensor;

pub fn probe_loss(tape: &mut Tape, y: NodeId, rng: &mut Rng) -> Result<NodeId> {
    let s = tape.value(y).shape();
    let mut mask = Tensor::zeros(s);
    for o in 0..s.c {
        mask.set_flat(s.index(rng.below(s.n), o, rng.below(s.h), rng.below(s.w)), 1.0);
    }
    let m = tape.constant(mask);
    let probed = tape.mul(y, m)?;
    Ok(tape.sum(probed))
}

/// Per-branch moments of the fusion-weight gradient under [`probe_loss`].
pub fn probe_gradients(
    tape: &mut Tape,
    pre_bn: NodeId,
    weight: NodeId,
    groups: &ChannelPartition,
    rng: &mut Rng,
) -> Result<Vec<Moments>> {
    let loss = probe_loss(tape, pre_bn, rng)?;
    let grads = tape.backward(loss)?;
    grad_group_moments(&grads[weight], groups)
}

/// Largest over smallest variance; 1 for a single group.
pub fn spread(parts: &[Moments]) -> f64 {
    let max = parts.iter().map(|m| m.variance).fold(f64::NEG_INFINITY, f64::max);
    let min = parts.iter().map(|m| m.variance).fold(f64::INFINITY, f64::min);
    max / min
}

/// Merges per-seed group moments group by group, in seed order.
pub fn pool(per_seed: &[Vec<Moments>]) -> Vec<Moments> {
    let groups = per_seed.first().map_or(0, Vec::len);
    (0..groups).map(|g| Moments::merge_all(per_seed.iter().map(|s| &s[g]))).collect()
}
