//! Injected equalizers against calibrated fusion weights over random fusion
//! configurations.

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::ConvAttrs;
use crate::config::ExperimentConfig;
use crate::decoders::{fuse, ConvUnitBlock, Equalization, FusionSpec, Graph, ParamStore};
use crate::equalizer::{calibrate_weights, GlobalStats};
use crate::error::Result;
use crate::ops::{scaled_len, UpsampleMode};
use crate::rng::{randn, Rng};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceCase {
    pub index: usize,
    pub channels: Vec<usize>,
    pub ratios: Vec<f64>,
    pub kernel: usize,
    pub bias: bool,
    /// Pre-BN gap with the bias folded.
    pub pre_bn: f64,
    /// Post-BN gap with the bias folded.
    pub post_bn: f64,
    /// Post-BN gap with the bias left untouched.
    pub post_bn_skip: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EquivalenceReport {
    pub cases: Vec<EquivalenceCase>,
    pub max_pre_bn: f64,
    pub max_post_bn_skip: f64,
}

struct Case {
    branches: Vec<Tensor>,
    spec: FusionSpec,
    store: ParamStore,
    stats: GlobalStats,
}

fn random_case(rng: &mut Rng) -> Result<Case> {
    let n = 2 + rng.below(3);
    let base = 2 + rng.below(3);
    let pool = [1.0, 2.0, 4.0];
    let mut ratios: Vec<f64> = (0..n).map(|_| pool[rng.below(3)]).collect();
    ratios[0] = 1.0;
    let top = ratios.iter().cloned().fold(1.0, f64::max);
    let ref_side = base * top as usize;
    let channels: Vec<usize> = (0..n).map(|_| 1 + rng.below(5)).collect();
    let (kernel, bias) = (if rng.below(2) == 0 { 1 } else { 3 }, rng.below(2) == 0);
    let out = 1 + rng.below(6);
    let batch = 2 + rng.below(2);
    let mut block = ConvUnitBlock::new("fuse", channels.iter().sum(), out, kernel);
    if bias {
        block = block.with_bias();
    }
    let mut store = ParamStore::new();
    block.init(&mut store, rng)?;
    if bias {
        store.insert(block.bias_name(), randn([1, out, 1, 1], 0.0, 1.0, rng)?);
    }
    let branches = ratios
        .iter()
        .zip(&channels)
        .map(|(&r, &c)| {
            let side = ref_side / r as usize;
            debug_assert_eq!(scaled_len(side, r), ref_side);
            randn([batch, c, side, side], rng.range(-3.0, 3.0), rng.range(0.05, 4.0), rng)
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = (0..n).map(|_| (rng.range(-2.0, 2.0), rng.range(0.05, 5.0))).collect();
    let stats = GlobalStats::from_moments(&pairs, 1 + rng.below(100) as u64)?;
    let spec = FusionSpec::new(ratios, channels, block, UpsampleMode::BILINEAR)?;
    Ok(Case { branches, spec, store, stats })
}

fn outputs(case: &Case, spec: &FusionSpec, store: &ParamStore, eq: Equalization) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::bind(store, |_| false);
    let ids: Vec<_> = case.branches.iter().map(|b| g.tape.constant(b.clone())).collect();
    let out = fuse(&mut g, &ids, spec, eq)?;
    Ok((g.tape.value(out.pre_bn).clone(), g.tape.value(out.output).clone()))
}

/// Fusion spec and parameters with the equalizer folded into the weights.
fn calibrated(case: &Case, skip_bias: bool) -> Result<(FusionSpec, ParamStore)> {
    let block = &case.spec.block;
    let bias = if block.bias { Some(case.store.get(&block.bias_name())?.data().to_vec()) } else { None };
    let cal = calibrate_weights(
        case.store.get(&block.weight_name())?,
        bias.as_deref(),
        &case.stats,
        &case.spec.partition(),
        skip_bias,
    )?;
    let mut store = case.store.clone();
    store.insert(block.weight_name(), cal.weight);
    let mut new_block = block.clone().with_attrs(ConvAttrs::same(block.k).with_pad_fill(cal.pad_fill));
    if let Some(b) = cal.bias {
        let n = b.len();
        store.insert(block.bias_name(), Tensor::new(Shape::new(1, n, 1, 1)?, b)?);
        new_block = new_block.with_bias();
    }
    Ok((FusionSpec { block: new_block, ..case.spec.clone() }, store))
}

pub fn run_equivalence(config: &ExperimentConfig) -> Result<EquivalenceReport> {
    let root = Rng::new(config.run.seed, 0).named("equivalence");
    let cases: Vec<EquivalenceCase> = (0..config.equivalence.configs)
        .into_par_iter()
        .map(|i| {
            let case = random_case(&mut root.derive(i as u64))?;
            let (pre_a, post_a) = outputs(&case, &case.spec, &case.store, Equalization::Injected(&case.stats))?;
            let (spec, store) = calibrated(&case, false)?;
            let (pre_b, post_b) = outputs(&case, &spec, &store, Equalization::Off)?;
            let (spec, store) = calibrated(&case, true)?;
            let (_, post_c) = outputs(&case, &spec, &store, Equalization::Off)?;
            Ok(EquivalenceCase {
                index: i,
                channels: case.spec.channels.clone(),
                ratios: case.spec.ratios.clone(),
                kernel: case.spec.block.k,
                bias: case.spec.block.bias,
                pre_bn: pre_a.max_abs_diff(&pre_b),
                post_bn: post_a.max_abs_diff(&post_b),
                post_bn_skip: post_a.max_abs_diff(&post_c),
            })
        })
        .collect::<Result<_>>()?;
    Ok(EquivalenceReport {
        max_pre_bn: cases.iter().map(|c| c.pre_bn).fold(0.0, f64::max),
        max_post_bn_skip: cases.iter().map(|c| c.post_bn_skip).fold(0.0, f64::max),
        cases,
    })
}
