//! Fixed per-branch standardization of concatenation subjects, the dataset
//! pass that measures it, and the equivalent one-off rescale of the fusion
//! weights.

mod record;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoders::{Equalization, Graph, ParamStore, Segmenter};
use crate::error::{Error, Result};
use crate::partition::ChannelPartition;
use crate::tensor::{Shape, Tensor};

/// Finalized per-branch statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    branches: Vec<BranchStats>,
    count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub mu: f64,
    pub sigma: f64,
    /// Sum over samples of the per-sample mean.
    pub m1: f64,
    /// Sum over samples of the per-sample mean square.
    pub m2: f64,
}

impl GlobalStats {
    /// Stats from explicit `(mu, sigma)` pairs, as if measured on `count` samples.
    pub fn from_moments(pairs: &[(f64, f64)], count: u64) -> Result<Self> {
        if count == 0 || pairs.is_empty() {
            return Err(Error::Contract("stats need at least one branch and one sample".into()));
        }
        let branches = pairs
            .iter()
            .enumerate()
            .map(|(i, &(mu, sigma))| {
                if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
                    return Err(Error::DegenerateFeature { branch: i, sigma });
                }
                let n = count as f64;
                Ok(BranchStats { mu, sigma, m1: mu * n, m2: (sigma * sigma + mu * mu) * n })
            })
            .collect::<Result<_>>()?;
        Ok(Self { branches, count })
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn branches(&self) -> &[BranchStats] {
        &self.branches
    }

    /// `(mu, sigma)` of branch `i`.
    pub fn branch(&self, i: usize) -> Result<(f64, f64)> {
        self.branches
            .get(i)
            .map(|b| (b.mu, b.sigma))
            .ok_or_else(|| Error::Contract(format!("no stats for branch {i}")))
    }
}

/// Running sums of per-sample `E[x]` and `E[x^2]` for each branch.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsAccumulator {
    m1: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
}

impl StatsAccumulator {
    pub fn new(branches: usize) -> Self {
        Self { m1: vec![0.0; branches], m2: vec![0.0; branches], count: 0 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// One sample's `(E[x], E[x^2])` per branch.
    pub fn push(&mut self, sample: &[(f64, f64)]) -> Result<()> {
        if sample.len() != self.m1.len() {
            return Err(Error::Contract(format!(
                "sample has {} branches, accumulator {}",
                sample.len(),
                self.m1.len()
            )));
        }
        for (i, &(e1, e2)) in sample.iter().enumerate() {
            self.m1[i] += e1;
            self.m2[i] += e2;
        }
        self.count += 1;
        Ok(())
    }

    /// Adds every sample of a batch, given each branch's tensor for the batch.
    pub fn push_batch(&mut self, branches: &[&Tensor]) -> Result<()> {
        let n = branches.first().map_or(0, |t| t.shape().n);
        if branches.iter().any(|t| t.shape().n != n) {
            return Err(Error::ShapeMismatch("branch tensors disagree on batch size".into()));
        }
        for s in 0..n {
            let sample: Vec<(f64, f64)> = branches.iter().map(|t| sample_moments(t, s)).collect();
            self.push(&sample)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.m1.len() != self.m1.len() {
            return Err(Error::Contract("merging accumulators of different widths".into()));
        }
        for i in 0..self.m1.len() {
            self.m1[i] += other.m1[i];
            self.m2[i] += other.m2[i];
        }
        self.count += other.count;
        Ok(())
    }

    /// `mu = m1 / |S|`, `sigma = sqrt(m2 / |S| - mu^2)`. A zero sigma is an
    /// error unless `sigma_floor` is given.
    pub fn finalize(&self, sigma_floor: Option<f64>) -> Result<GlobalStats> {
        if self.count == 0 {
            return Err(Error::Contract("statistics over an empty dataset".into()));
        }
        let n = self.count as f64;
        let branches = (0..self.m1.len())
            .map(|i| {
                let mu = self.m1[i] / n;
                let mut sigma = (self.m2[i] / n - mu * mu).max(0.0).sqrt();
                if let Some(floor) = sigma_floor {
                    sigma = sigma.max(floor);
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::DegenerateFeature { branch: i, sigma });
                }
                Ok(BranchStats { mu, sigma, m1: self.m1[i], m2: self.m2[i] })
            })
            .collect::<Result<_>>()?;
        Ok(GlobalStats { branches, count: self.count })
    }
}

/// `(E[x], E[x^2])` over one sample of a batch.
fn sample_moments(t: &Tensor, n: usize) -> (f64, f64) {
    let s = t.shape();
    let per = s.c * s.plane();
    let vals = &t.data()[n * per..(n + 1) * per];
    let (sum, sq) = vals.iter().fold((0.0, 0.0), |(a, b), &v| (a + v, b + v * v));
    (sum / per as f64, sq / per as f64)
}

/// `(x - mu) / sigma`.
pub fn scale_equalize(x: &Tensor, mu: f64, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::DegenerateFeature { branch: 0, sigma });
    }
    Ok(x.map(|v| (v - mu) / sigma))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapPoint {
    /// Concatenation subjects, after upsampling.
    #[default]
    PostUpsample,
    /// The encoder features the head consumes.
    EncoderFeature,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EqualizeMode {
    #[default]
    Off,
    Injected,
    Calibrated,
}

impl std::str::FromStr for EqualizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "injected" => Ok(Self::Injected),
            "calibrated" => Ok(Self::Calibrated),
            _ => Err(Error::Config(format!("unknown equalize mode {s:?}"))),
        }
    }
}

/// Streams `batches` through the model once, in batch-statistics mode, and
/// accumulates per-sample moments at the tapped tensors. Batches are processed
/// in parallel; partial sums are merged in batch order.
pub fn accumulate_stats(
    model: &Segmenter,
    store: &ParamStore,
    batches: &[Tensor],
    tap: TapPoint,
    sigma_floor: Option<f64>,
) -> Result<GlobalStats> {
    if batches.is_empty() {
        return Err(Error::Contract("statistics over an empty dataset".into()));
    }
    let parts: Vec<StatsAccumulator> = batches
        .par_iter()
        .map(|batch| {
            let mut g = Graph::bind(store, |_| false);
            let x = g.tape.constant(batch.clone());
            let out = model.forward(&mut g, x, Equalization::Off)?;
            let taps = match tap {
                TapPoint::PostUpsample => {
                    out.fusion.ok_or_else(|| Error::Contract("head has no fusion".into()))?.1.subjects
                }
                TapPoint::EncoderFeature => out.features,
            };
            let tensors: Vec<&Tensor> = taps.iter().map(|&t| g.tape.value(t)).collect();
            let mut acc = StatsAccumulator::new(tensors.len());
            acc.push_batch(&tensors)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = StatsAccumulator::new(parts[0].m1.len());
    for p in &parts {
        total.merge(p)?;
    }
    total.finalize(sigma_floor)
}

/// Fusion weights and bias folded with the equalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibrated {
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
    /// Per-input-channel padding value that keeps border outputs equal.
    pub pad_fill: Vec<f64>,
}

/// `w'_i = w_i / sigma_i`, `b' = b - sum_i w_i mu_i / sigma_i` summed over
/// kernel taps. With `skip_bias` the bias is left as given.
pub fn calibrate_weights(
    weight: &Tensor,
    bias: Option<&[f64]>,
    stats: &GlobalStats,
    groups: &ChannelPartition,
    skip_bias: bool,
) -> Result<Calibrated> {
    let s = weight.shape();
    groups.validate(s.c)?;
    if groups.len() != stats.len() {
        return Err(Error::Contract(format!(
            "{} channel groups for {} branch stats",
            groups.len(),
            stats.len()
        )));
    }
    if let Some(b) = bias {
        if b.len() != s.n {
            return Err(Error::ShapeMismatch(format!("bias has {} entries for {} outputs", b.len(), s.n)));
        }
    }
    let mut mu = vec![0.0; s.c];
    let mut sigma = vec![0.0; s.c];
    for (i, g) in groups.groups().iter().enumerate() {
        let (m, sd) = stats.branch(i)?;
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(Error::DegenerateFeature { branch: i, sigma: sd });
        }
        for c in g.clone() {
            mu[c] = m;
            sigma[c] = sd;
        }
    }
    let k = s.plane();
    let mut w = weight.data().to_vec();
    let mut shift = vec![0.0; s.n];
    for o in 0..s.n {
        for c in 0..s.c {
            let taps = &mut w[(o * s.c + c) * k..(o * s.c + c + 1) * k];
            let tap_sum: f64 = taps.iter().sum();
            shift[o] += tap_sum * mu[c] / sigma[c];
            taps.iter_mut().for_each(|v| *v /= sigma[c]);
        }
    }
    let bias = if skip_bias {
        bias.map(<[f64]>::to_vec)
    } else {
        let base = bias.map_or_else(|| vec![0.0; s.n], <[f64]>::to_vec);
        Some(base.iter().zip(&shift).map(|(b, d)| b - d).collect())
    };
    Ok(Calibrated { weight: Tensor::with_dtype(s, w, weight.dtype())?, bias, pad_fill: mu })
}

/// Folds `stats` into the fusion block of `model` and its parameters in `store`.
pub fn calibrate_segmenter(
    model: &mut Segmenter,
    store: &mut ParamStore,
    stats: &GlobalStats,
    groups: &ChannelPartition,
    skip_bias: bool,
) -> Result<()> {
    let block = model
        .fusion_block_mut()
        .ok_or_else(|| Error::Contract("head has no fusion block".into()))?;
    let bias = if block.bias { Some(store.get(&block.bias_name())?.data().to_vec()) } else { None };
    let cal = calibrate_weights(store.get(&block.weight_name())?, bias.as_deref(), stats, groups, skip_bias)?;
    store.insert(block.weight_name(), cal.weight);
    if let Some(b) = cal.bias {
        let n = b.len();
        store.insert(block.bias_name(), Tensor::new(Shape { n: 1, c: n, h: 1, w: 1 }, b)?);
        block.bias = true;
    }
    block.attrs.pad_fill = Some(cal.pad_fill);
    Ok(())
}

#[cfg(test)]
mod tests;
