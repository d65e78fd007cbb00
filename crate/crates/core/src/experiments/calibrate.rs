//! One-time calibration of a head on the synthetic dataset: accumulate branch
//! statistics, fold them into the fusion weights, then confirm the folded head
//! reproduces the injected-equalizer forward pass.

use std::time::Instant;

use serde::Serialize;

use super::data::{gen_synthetic_with, image_batches};
use crate::config::ExperimentConfig;
use crate::decoders::{Equalization, Graph, ParamStore, Segmenter};
use crate::equalizer::{accumulate_stats, calibrate_segmenter, GlobalStats, TapPoint};
use crate::error::{Error, Result};
use crate::partition::ChannelPartition;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Calibration {
    pub seg: Segmenter,
    /// Parameters with the configured bias handling folded in.
    pub store: ParamStore,
    pub stats: GlobalStats,
    pub samples: usize,
    /// Statistics pass plus weight fold.
    pub seconds: f64,
    /// Fusion pre-BN gap against the injected equalizer, bias folded.
    pub pre_bn_gap: f64,
    /// Fusion output gap with the bias left untouched.
    pub post_bn_skip_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationSummary {
    pub head: String,
    pub samples: usize,
    pub branches: usize,
    pub min_sigma: f64,
    pub seconds: f64,
    pub pre_bn_gap: f64,
    pub post_bn_skip_gap: f64,
}

impl Calibration {
    pub fn summary(&self) -> CalibrationSummary {
        CalibrationSummary {
            head: self.seg.config.kind.as_str().into(),
            samples: self.samples,
            branches: self.stats.len(),
            min_sigma: self.stats.branches().iter().map(|b| b.sigma).fold(f64::INFINITY, f64::min),
            seconds: self.seconds,
            pre_bn_gap: self.pre_bn_gap,
            post_bn_skip_gap: self.post_bn_skip_gap,
        }
    }
}

/// `(pre_bn, output)` of the fusion block.
fn fusion_values(seg: &Segmenter, store: &ParamStore, x: &Tensor, eq: Equalization) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::bind(store, |_| false);
    let xi = g.tape.constant(x.clone());
    let (_, f) = seg.forward(&mut g, xi, eq)?.fusion.ok_or_else(|| Error::Contract("head has no fusion".into()))?;
    Ok((g.tape.value(f.pre_bn).clone(), g.tape.value(f.output).clone()))
}

fn folded(
    seg: &Segmenter,
    store: &ParamStore,
    stats: &GlobalStats,
    groups: &ChannelPartition,
    skip_bias: bool,
) -> Result<(Segmenter, ParamStore)> {
    let (mut s, mut p) = (seg.clone(), store.clone());
    calibrate_segmenter(&mut s, &mut p, stats, groups, skip_bias)?;
    Ok((s, p))
}

pub fn run_calibrate(config: &ExperimentConfig) -> Result<Calibration> {
    let c = &config.calibrate;
    let dtype = config.run.precision.dtype();
    let root = Rng::new(config.run.seed, 0).named("calibrate");
    let seg = Segmenter::new(config.head.clone())?;
    let store = seg.init(&root.named("init"))?;
    let data = gen_synthetic_with(&root.named("data"), c.dataset, config.head.classes, c.image)?;
    let batches: Vec<Tensor> = image_batches(&data, c.batch)?.iter().map(|b| b.cast(dtype)).collect();

    let groups = {
        let mut g = Graph::bind(&store, |_| false);
        let x = g.tape.constant(batches[0].clone());
        let (spec, _) = seg
            .forward(&mut g, x, Equalization::Off)?
            .fusion
            .ok_or_else(|| Error::Contract("calibration needs a head with a fusion layer".into()))?;
        spec.partition()
    };

    let start = Instant::now();
    let stats = accumulate_stats(&seg, &store, &batches, TapPoint::PostUpsample, config.equalizer.sigma_floor)?;
    let (cal_seg, cal_store) = folded(&seg, &store, &stats, &groups, config.equalizer.skip_bias)?;
    let seconds = start.elapsed().as_secs_f64();

    // both bias treatments against the injected reference, on the last batch
    let x = &batches[batches.len() - 1];
    let (ref_pre, ref_out) = fusion_values(&seg, &store, x, Equalization::Injected(&stats))?;
    let (fs, fp) = folded(&seg, &store, &stats, &groups, false)?;
    let pre_bn_gap = fusion_values(&fs, &fp, x, Equalization::Off)?.0.max_abs_diff(&ref_pre);
    let (ss, sp) = folded(&seg, &store, &stats, &groups, true)?;
    let post_bn_skip_gap = fusion_values(&ss, &sp, x, Equalization::Off)?.1.max_abs_diff(&ref_out);

    Ok(Calibration { seg: cal_seg, store: cal_store, stats, samples: data.len(), seconds, pre_bn_gap, post_bn_skip_gap })
}
