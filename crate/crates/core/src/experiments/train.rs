//! Plain SGD on the synthetic scenes, once without and once with equalizers,
//! from the same initialization and batch order.

use serde::Serialize;

use super::audit::fusion_probe;
use super::data::{collate, gen_synthetic_with, image_batches, SyntheticSample};
use super::probe::spread;
use crate::config::ExperimentConfig;
use crate::decoders::{Equalization, Graph, HeadConfig, ParamStore, Segmenter};
use crate::equalizer::{accumulate_stats, calibrate_segmenter, EqualizeMode, GlobalStats, TapPoint};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRow {
    pub arm: String,
    pub step: usize,
    pub loss: f64,
    pub pixel_acc: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub mode: EqualizeMode,
    pub initial_loss: f64,
    /// Mean loss over the last `tail` steps.
    pub final_loss: f64,
    pub loss_reduction: f64,
    pub finite: bool,
    /// Fusion probe-gradient spread on the first batch, before any update.
    pub step0_grad_spread: f64,
    pub eval_pixel_acc: f64,
    pub eval_miou: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub arms: Vec<ArmSummary>,
}

impl TrainReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

/// Per-pixel argmax over channels, laid out like the labels.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let hw = s.plane();
    let mut out = Vec::with_capacity(s.n * hw);
    for n in 0..s.n {
        for p in 0..hw {
            let best = (0..s.c)
                .max_by(|&a, &b| logits.plane(n, a)[p].total_cmp(&logits.plane(n, b)[p]))
                .unwrap_or(0);
            out.push(best);
        }
    }
    out
}

pub fn pixel_accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Mean over classes present in either map of intersection over union.
pub fn mean_iou(pred: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if p == l {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[l] += 1;
        }
    }
    let seen: Vec<f64> = (0..classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    seen.iter().sum::<f64>() / seen.len().max(1) as f64
}

/// Fixed sample order: a fresh permutation of the dataset per epoch.
fn schedule(n: usize, batch: usize, steps: usize, rng: &Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0;
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        if order.len() < batch {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut r = rng.derive(epoch);
            for i in (1..n).rev() {
                perm.swap(i, r.below(i + 1));
            }
            order.extend(perm);
            epoch += 1;
        }
        out.push(order.drain(..batch.min(order.len())).collect());
    }
    out
}

struct Arm<'a> {
    name: &'static str,
    mode: EqualizeMode,
    seg: Segmenter,
    store: ParamStore,
    stats: Option<&'a GlobalStats>,
}

impl Arm<'_> {
    fn eq(&self) -> Equalization<'_> {
        match (self.mode, self.stats) {
            (EqualizeMode::Injected, Some(s)) => Equalization::Injected(s),
            _ => Equalization::Off,
        }
    }

    /// One SGD step; returns loss and pixel accuracy on the batch.
    fn step(&mut self, x: &Tensor, labels: &[usize], lr: f64) -> Result<(f64, f64)> {
        let mut g = Graph::bind(&self.store, |_| true);
        let xi = g.tape.constant(x.clone());
        let out = self.seg.forward(&mut g, xi, self.eq())?;
        let loss = g.tape.softmax_cross_entropy(out.logits, labels)?;
        let value = g.tape.value(loss).data()[0];
        let acc = pixel_accuracy(&predictions(g.tape.value(out.logits)), labels);
        if !value.is_finite() {
            return Ok((value, acc));
        }
        let grads = g.tape.backward(loss)?;
        for (name, id) in g.params() {
            let p = self.store.get_mut(name)?;
            let upd: Vec<f64> = p.data().iter().zip(grads[id].data()).map(|(w, d)| w - lr * d).collect();
            *p = Tensor::with_dtype(p.shape(), upd, p.dtype())?;
        }
        Ok((value, acc))
    }

    fn evaluate(&self, eval: &[SyntheticSample], batch: usize, dtype: DType, classes: usize) -> Result<(f64, f64)> {
        let mut pred = Vec::new();
        let mut labels = Vec::new();
        for chunk in eval.chunks(batch) {
            let (x, y) = collate(chunk)?;
            let mut g = Graph::bind(&self.store, |_| false);
            let xi = g.tape.constant(x.cast(dtype));
            let out = self.seg.forward(&mut g, xi, self.eq())?;
            pred.extend(predictions(g.tape.value(out.logits)));
            labels.extend(y);
        }
        Ok((pixel_accuracy(&pred, &labels), mean_iou(&pred, &labels, classes)))
    }
}

/// Runs the baseline arm and, unless equalization is off, the equalized arm.
pub fn run_toy_train(config: &ExperimentConfig) -> Result<TrainReport> {
    let t = &config.train;
    let hash = config.hash();
    let dtype = config.run.precision.dtype();
    let head: HeadConfig = config.head.clone();
    let root = Rng::new(config.run.seed, 0).named("train");
    let data = gen_synthetic_with(&root.named("data"), t.dataset, head.classes, t.image)?;
    let eval = gen_synthetic_with(&root.named("eval"), t.eval_samples.max(1), head.classes, t.image)?;
    let seg = Segmenter::new(head.clone())?;
    let store = seg.init(&root.named("init"))?;

    let stats_n = t.stats_samples.clamp(1, data.len());
    let batches: Vec<Tensor> =
        image_batches(&data[..stats_n], t.batch)?.iter().map(|b| b.cast(dtype)).collect();
    let mode = config.equalizer.mode;
    let stats = match mode {
        EqualizeMode::Off => None,
        _ => Some(accumulate_stats(&seg, &store, &batches, TapPoint::PostUpsample, config.equalizer.sigma_floor)?),
    };

    let mut arms = vec![Arm { name: "baseline", mode: EqualizeMode::Off, seg: seg.clone(), store: store.clone(), stats: None }];
    if let Some(s) = &stats {
        let mut arm = Arm { name: "equalized", mode, seg: seg.clone(), store: store.clone(), stats: Some(s) };
        if mode == EqualizeMode::Calibrated {
            let mut g = Graph::bind(&arm.store, |_| false);
            let x = g.tape.constant(batches[0].clone());
            let (spec, _) = arm.seg.forward(&mut g, x, Equalization::Off)?.fusion.ok_or_else(|| {
                Error::Contract("calibration needs a head with a fusion layer".into())
            })?;
            calibrate_segmenter(&mut arm.seg, &mut arm.store, s, &spec.partition(), config.equalizer.skip_bias)?;
        }
        arms.push(arm);
    }

    let plan = schedule(data.len(), t.batch, t.steps, &root.named("order"));
    let first = collate(&data[..t.batch.min(data.len())])?.0.cast(dtype);
    let mut report = TrainReport::default();
    for mut arm in arms {
        let step0_grad_spread = if arm.seg.fusion_block().is_some() {
            spread(&fusion_probe(&arm.seg, &arm.store, &first, arm.eq(), &mut root.named("probe"))?)
        } else {
            1.0
        };
        let mut losses = Vec::with_capacity(t.steps);
        for (step, idx) in plan.iter().enumerate() {
            let chunk: Vec<SyntheticSample> = idx.iter().map(|&i| data[i].clone()).collect();
            let (x, y) = collate(&chunk)?;
            let (loss, acc) = arm.step(&x.cast(dtype), &y, t.lr)?;
            report.rows.push(TrainRow {
                arm: arm.name.into(),
                step,
                loss,
                pixel_acc: acc,
                config_hash: hash.clone(),
            });
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} arm diverged at step {step} (seed {})",
                    arm.name, config.run.seed
                )));
            }
            losses.push(loss);
        }
        let initial_loss = losses.first().copied().unwrap_or(f64::NAN);
        let tail = &losses[losses.len().saturating_sub(t.tail.max(1))..];
        let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
        let (eval_pixel_acc, eval_miou) = arm.evaluate(&eval, t.batch, dtype, head.classes)?;
        report.arms.push(ArmSummary {
            arm: arm.name.into(),
            mode: arm.mode,
            initial_loss,
            final_loss,
            loss_reduction: 1.0 - final_loss / initial_loss,
            finite: losses.iter().all(|l| l.is_finite()),
            step0_grad_spread,
            eval_pixel_acc,
            eval_miou,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_by_hand() {
        let labels = [0, 0, 1, 2];
        let pred = [0, 1, 1, 2];
        assert_eq!(pixel_accuracy(&pred, &labels), 0.75);
        // class 0: 1/2, class 1: 1/2, class 2: 1
        assert!((mean_iou(&pred, &labels, 4) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_layout() {
        let logits = Tensor::from_fn(crate::tensor::Shape::new(2, 3, 1, 2).unwrap(), |n, c, _, w| {
            if c == (n + w) % 3 { 1.0 } else { 0.0 }
        });
        assert_eq!(predictions(&logits), vec![0, 1, 1, 2]);
    }

    #[test]
    fn schedule_covers_epochs() {
        let plan = schedule(10, 4, 5, &Rng::new(0, 0));
        assert_eq!(plan.len(), 5);
        assert!(plan.iter().all(|b| b.len() == 4));
        let mut first: Vec<usize> = plan[..2].concat();
        first.sort();
        first.dedup();
        assert_eq!(first.len(), 8);
    }

    #[test]
    fn zero_steps_start_near_uniform() {
        let mut c = ExperimentConfig::default();
        c.train.steps = 1;
        c.train.dataset = 16;
        c.train.stats_samples = 16;
        c.train.eval_samples = 8;
        let rep = run_toy_train(&c).unwrap();
        for arm in &rep.arms {
            assert!((arm.initial_loss - 4f64.ln()).abs() < 0.2, "{arm:?}");
        }
        assert_eq!(rep.rows.len(), 2);
    }
}
