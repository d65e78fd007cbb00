//! Output moments of a freshly initialized Conv-BN-ReLU block on Gaussian input.

use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::decoders::{ConvUnitBlock, ParamStore};
use crate::error::Result;
use crate::ops::{batchnorm, conv2d, BatchNormParams, ConvParams};
use crate::rng::{randn, Rng};
use crate::stats::Moments;

pub fn relu_bn_mean() -> f64 {
    1.0 / (2.0 * PI).sqrt()
}

pub fn relu_bn_variance() -> f64 {
    (PI - 1.0) / (2.0 * PI)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstantsReport {
    pub shape: [usize; 4],
    pub out_channels: usize,
    pub mean: f64,
    pub variance: f64,
    pub mean_rel_err: f64,
    pub variance_rel_err: f64,
    pub seconds: f64,
}

pub fn run_constants(config: &ExperimentConfig) -> Result<ConstantsReport> {
    let c = &config.constants;
    let start = Instant::now();
    let rng = Rng::new(config.run.seed, 0).named("constants");
    let block = ConvUnitBlock::new("unit", c.shape[1], c.out_channels, c.kernel);
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng.named("weights"))?;
    let x = randn(c.shape, 0.0, 1.0, &mut rng.named("input"))?.cast(config.run.precision.dtype());
    let y = conv2d(&x, &ConvParams::same(store.get(&block.weight_name())?.clone()))?;
    drop(x);
    let z = batchnorm(&y, &BatchNormParams::new(c.out_channels))?;
    drop(y);
    // ReLU moments straight off the normalized planes
    let parts: Vec<Moments> = z
        .data()
        .par_chunks(z.shape().plane())
        .map(|p| Moments::of(&p.iter().map(|v| v.max(0.0)).collect::<Vec<_>>()))
        .collect();
    let m = Moments::merge_all(&parts);
    Ok(ConstantsReport {
        shape: c.shape,
        out_channels: c.out_channels,
        mean: m.mean,
        variance: m.variance,
        mean_rel_err: (m.mean / relu_bn_mean() - 1.0).abs(),
        variance_rel_err: (m.variance / relu_bn_variance() - 1.0).abs(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((relu_bn_mean() - 0.398_942_280_4).abs() < 1e-9);
        assert!((relu_bn_variance() - 0.340_845_056_6).abs() < 1e-9);
    }

    #[test]
    fn small_block_lands_near_constants() {
        let mut c = ExperimentConfig::default();
        c.constants.shape = [4, 64, 16, 16];
        c.constants.out_channels = 32;
        c.constants.kernel = 3;
        let r = run_constants(&c).unwrap();
        assert!(r.mean_rel_err < 0.03 && r.variance_rel_err < 0.03, "{r:?}");
    }
}
