//! Concatenation-subject and fusion-gradient scales of each decoder head at
//! initialization, with and without equalizers.

use rayon::prelude::*;
use serde::Serialize;

use super::data::{gen_synthetic_with, image_batches};
use super::probe::{pool, probe_gradients, spread};
use crate::config::ExperimentConfig;
use crate::decoders::{Equalization, Graph, HeadConfig, HeadKind, ParamStore, Segmenter};
use crate::equalizer::{accumulate_stats, GlobalStats, StatsAccumulator, TapPoint};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stats::Moments;
use crate::tensor::Tensor;

/// Per-branch probe-gradient moments of the fusion weight on one batch.
pub fn fusion_probe(
    seg: &Segmenter,
    store: &ParamStore,
    batch: &Tensor,
    eq: Equalization,
    rng: &mut Rng,
) -> Result<Vec<Moments>> {
    let block = seg.fusion_block().ok_or_else(|| Error::Contract("head has no fusion".into()))?;
    let wname = block.weight_name();
    let mut g = Graph::bind(store, |n| n == wname);
    let x = g.tape.constant(batch.clone());
    let out = seg.forward(&mut g, x, eq)?;
    let (spec, fused) = out.fusion.ok_or_else(|| Error::Contract("head has no fusion".into()))?;
    let w = g.param(&wname)?;
    probe_gradients(&mut g.tape, fused.pre_bn, w, &spec.partition(), rng)
}

/// Moments of what the fusion concatenates, over all of `batches`.
pub fn concatenated_moments(
    seg: &Segmenter,
    store: &ParamStore,
    batches: &[Tensor],
    eq: Equalization,
) -> Result<GlobalStats> {
    let mut acc: Option<StatsAccumulator> = None;
    for b in batches {
        let mut g = Graph::bind(store, |_| false);
        let x = g.tape.constant(b.clone());
        let out = seg.forward(&mut g, x, eq)?;
        let (_, fused) = out.fusion.ok_or_else(|| Error::Contract("head has no fusion".into()))?;
        let ts: Vec<&Tensor> = fused.inputs.iter().map(|&i| g.tape.value(i)).collect();
        acc.get_or_insert_with(|| StatsAccumulator::new(ts.len())).push_batch(&ts)?;
    }
    acc.ok_or_else(|| Error::Contract("no batches".into()))?.finalize(None)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub head: String,
    pub seed: usize,
    pub branch: usize,
    pub ratio: f64,
    pub mu: f64,
    pub var: f64,
    pub eq_mu: f64,
    pub eq_var: f64,
    pub grad_var: f64,
    pub eq_grad_var: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct HeadAudit {
    pub head: HeadKind,
    pub seeds: usize,
    pub ratios: Vec<f64>,
    /// Seeds whose largest-variance subject is an `r = 1` subject.
    pub r1_max: usize,
    /// Seeds whose subject variance falls strictly as `r` grows.
    pub strictly_decreasing: usize,
    /// Largest `|mu|` or `|var - 1|` of an equalized subject.
    pub eq_max_dev: f64,
    pub grad_spread: f64,
    pub eq_grad_spread: f64,
    /// Pooled per-branch probe-gradient variance.
    pub grad_var: Vec<f64>,
    pub eq_grad_var: Vec<f64>,
}

impl HeadAudit {
    /// Seed count that counts as "nearly all": 30 of 32.
    pub fn required(&self) -> usize {
        self.seeds - self.seeds / 16
    }

    pub fn dominance_holds(&self) -> bool {
        self.r1_max >= self.required()
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub heads: Vec<HeadAudit>,
}

impl AuditReport {
    pub fn head(&self, kind: HeadKind) -> Option<&HeadAudit> {
        self.heads.iter().find(|h| h.head == kind)
    }
}

struct SeedAudit {
    ratios: Vec<f64>,
    base: Vec<(f64, f64)>,
    eq: Vec<(f64, f64)>,
    grads: Vec<Moments>,
    eq_grads: Vec<Moments>,
}

fn audit_seed(config: &ExperimentConfig, head: &HeadConfig, rng: &Rng) -> Result<SeedAudit> {
    let a = &config.audit;
    let seg = Segmenter::new(head.clone())?;
    let store = seg.init(rng)?;
    let data = gen_synthetic_with(&rng.named("data"), a.stats_samples, head.classes, a.image)?;
    let dtype = config.run.precision.dtype();
    let batches: Vec<Tensor> = image_batches(&data, a.batch)?.iter().map(|b| b.cast(dtype)).collect();
    let stats = accumulate_stats(&seg, &store, &batches, TapPoint::PostUpsample, config.equalizer.sigma_floor)?;
    let eq = concatenated_moments(&seg, &store, &batches, Equalization::Injected(&stats))?;
    let probe_rng = rng.named("probe");
    let grads = fusion_probe(&seg, &store, &batches[0], Equalization::Off, &mut probe_rng.clone())?;
    let eq_grads = fusion_probe(&seg, &store, &batches[0], Equalization::Injected(&stats), &mut probe_rng.clone())?;
    let mut g = Graph::bind(&store, |_| false);
    let x = g.tape.constant(batches[0].clone());
    let (spec, _) = seg.forward(&mut g, x, Equalization::Off)?.fusion.expect("checked by fusion_probe");
    let pairs = |s: &GlobalStats| s.branches().iter().map(|b| (b.mu, b.sigma * b.sigma)).collect();
    Ok(SeedAudit { ratios: spec.ratios, base: pairs(&stats), eq: pairs(&eq), grads, eq_grads })
}

pub fn run_head_audit(config: &ExperimentConfig) -> Result<AuditReport> {
    let a = &config.audit;
    let hash = config.hash();
    let mut report = AuditReport::default();
    for &kind in &a.heads {
        let head = HeadConfig { kind, ..config.head.clone() };
        let root = Rng::new(config.run.seed, 0).named("audit").named(kind.as_str());
        let seeds: Vec<SeedAudit> = (0..a.seeds)
            .into_par_iter()
            .map(|s| audit_seed(config, &head, &root.derive(s as u64)))
            .collect::<Result<_>>()?;
        let ratios = seeds[0].ratios.clone();
        let mut r1_max = 0;
        let mut strictly_decreasing = 0;
        let mut eq_max_dev: f64 = 0.0;
        for (s, sa) in seeds.iter().enumerate() {
            let vars: Vec<f64> = sa.base.iter().map(|p| p.1).collect();
            let top = (0..vars.len()).max_by(|&i, &j| vars[i].total_cmp(&vars[j])).unwrap_or(0);
            r1_max += usize::from(sa.ratios[top] == 1.0);
            let mut order: Vec<usize> = (0..vars.len()).collect();
            order.sort_by(|&i, &j| sa.ratios[i].total_cmp(&sa.ratios[j]));
            strictly_decreasing += usize::from(order.windows(2).all(|w| {
                sa.ratios[w[0]] == sa.ratios[w[1]] || vars[w[0]] > vars[w[1]]
            }));
            for (b, &(mu, var)) in sa.base.iter().enumerate() {
                let (emu, evar) = sa.eq[b];
                eq_max_dev = eq_max_dev.max(emu.abs()).max((evar - 1.0).abs());
                report.rows.push(AuditRow {
                    head: kind.as_str().into(),
                    seed: s,
                    branch: b,
                    ratio: sa.ratios[b],
                    mu,
                    var,
                    eq_mu: emu,
                    eq_var: evar,
                    grad_var: sa.grads[b].variance,
                    eq_grad_var: sa.eq_grads[b].variance,
                    config_hash: hash.clone(),
                });
            }
        }
        let grads = pool(&seeds.iter().map(|s| s.grads.clone()).collect::<Vec<_>>());
        let eq_grads = pool(&seeds.iter().map(|s| s.eq_grads.clone()).collect::<Vec<_>>());
        report.heads.push(HeadAudit {
            head: kind,
            seeds: a.seeds,
            ratios,
            r1_max,
            strictly_decreasing,
            eq_max_dev,
            grad_spread: spread(&grads),
            eq_grad_spread: spread(&eq_grads),
            grad_var: grads.iter().map(|m| m.variance).collect(),
            eq_grad_var: eq_grads.iter().map(|m| m.variance).collect(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: HeadKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.audit.heads = vec![kind];
        c.audit.seeds = 2;
        c.audit.stats_samples = 8;
        c.audit.batch = 4;
        c
    }

    #[test]
    fn uperhead_rows_and_equalized_subjects() {
        let rep = run_head_audit(&small(HeadKind::UperHead)).unwrap();
        assert_eq!(rep.rows.len(), 2 * 4);
        let h = rep.head(HeadKind::UperHead).unwrap();
        assert_eq!(h.ratios, vec![1.0, 2.0, 4.0, 8.0]);
        assert!(h.eq_max_dev < 1e-6, "{h:?}");
        assert!(h.grad_spread > h.eq_grad_spread);
    }

    #[test]
    fn fcn_is_trivially_balanced() {
        let rep = run_head_audit(&small(HeadKind::FcnHead)).unwrap();
        let h = rep.head(HeadKind::FcnHead).unwrap();
        assert_eq!(h.ratios, vec![1.0]);
        assert_eq!(h.r1_max, 2);
        assert_eq!(h.grad_spread, 1.0);
        assert_eq!(h.eq_grad_spread, 1.0);
    }
}
