//! Two-branch linear fusion with a constructed input-variance ratio, and the
//! gradient-variance ratio it induces on the two weight groups.

use rayon::prelude::*;
use serde::Serialize;

use super::probe::{pool, probe_gradients};
use crate::autodiff::{ConvAttrs, Tape};
use crate::config::ExperimentConfig;
use crate::equalizer::{GlobalStats, StatsAccumulator};
use crate::error::Result;
use crate::partition::ChannelPartition;
use crate::rng::{randn, Rng};
use crate::stats::Moments;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Row {
    /// Seed index, or `pooled`.
    pub seed: String,
    pub input_ratio: f64,
    pub equalized: bool,
    pub grad_var_1: f64,
    pub grad_var_2: f64,
    pub grad_ratio: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Prop1Report {
    pub rows: Vec<Prop1Row>,
}

impl Prop1Report {
    pub fn pooled(&self, input_ratio: f64, equalized: bool) -> Option<&Prop1Row> {
        self.rows
            .iter()
            .find(|r| r.seed == "pooled" && r.input_ratio == input_ratio && r.equalized == equalized)
    }
}

fn branch_pair(dims: [usize; 4], ratio: f64, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    Ok((randn(dims, 0.0, ratio.sqrt(), rng)?, randn(dims, 0.0, 1.0, rng)?))
}

/// Probe-gradient moments of the two weight groups for one seed.
fn one_seed(config: &ExperimentConfig, ratio: f64, equalized: bool, rng: &Rng) -> Result<Vec<Moments>> {
    let p = &config.prop1;
    let dtype = config.run.precision.dtype();
    let dims = [p.batch, p.channels, p.size, p.size];
    let (mut x1, mut x2) = branch_pair(dims, ratio, &mut rng.named("data"))?;
    if equalized {
        // statistics come from an independent batch, as they would from a dataset
        let (s1, s2) = branch_pair(dims, ratio, &mut rng.named("stats"))?;
        let mut acc = StatsAccumulator::new(2);
        acc.push_batch(&[&s1, &s2])?;
        let stats: GlobalStats = acc.finalize(None)?;
        let (m1, sd1) = stats.branch(0)?;
        let (m2, sd2) = stats.branch(1)?;
        x1 = x1.map(|v| (v - m1) / sd1);
        x2 = x2.map(|v| (v - m2) / sd2);
    }
    let mut t = Tape::new();
    let a = t.constant(x1.cast(dtype));
    let b = t.constant(x2.cast(dtype));
    let z = t.concat(&[a, b])?;
    let fan_in = 2 * p.channels;
    let w = t.param(randn([p.out_channels, fan_in, 1, 1], 0.0, (2.0 / fan_in as f64).sqrt(), &mut rng.named("w"))?);
    let y = t.conv2d(z, w, None, &ConvAttrs::same(1))?;
    let groups = ChannelPartition::from_sizes(&[p.channels, p.channels]);
    probe_gradients(&mut t, y, w, &groups, &mut rng.named("probe"))
}

pub fn run_prop1(config: &ExperimentConfig) -> Result<Prop1Report> {
    let p = &config.prop1;
    let hash = config.hash();
    let root = Rng::new(config.run.seed, 0).named("prop1");
    let mut report = Prop1Report::default();
    for &ratio in &p.variance_ratios {
        for equalized in [false, true] {
            let per_seed: Vec<Vec<Moments>> = (0..p.seeds)
                .into_par_iter()
                .map(|s| one_seed(config, ratio, equalized, &root.derive(s as u64)))
                .collect::<Result<_>>()?;
            let row = |seed: String, m: &[Moments]| Prop1Row {
                seed,
                input_ratio: ratio,
                equalized,
                grad_var_1: m[0].variance,
                grad_var_2: m[1].variance,
                grad_ratio: m[0].variance / m[1].variance,
                config_hash: hash.clone(),
            };
            for (s, m) in per_seed.iter().enumerate() {
                report.rows.push(row(s.to_string(), m));
            }
            report.rows.push(row("pooled".into(), &pool(&per_seed)));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_track_construction() {
        let mut c = ExperimentConfig::default();
        c.prop1.seeds = 8;
        let rep = run_prop1(&c).unwrap();
        assert_eq!(rep.rows.len(), 2 * 2 * 9);
        let r10 = rep.pooled(10.0, false).unwrap().grad_ratio;
        assert!((r10 / 10.0 - 1.0).abs() < 0.1, "{r10}");
        let eq = rep.pooled(10.0, true).unwrap().grad_ratio;
        assert!((eq - 1.0).abs() < 0.1, "{eq}");
        assert!(rep.pooled(3.0, false).is_none());
    }
}
