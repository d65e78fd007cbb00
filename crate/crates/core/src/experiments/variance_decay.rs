//! Randomized check that bilinear upsampling never increases variance, with
//! nearest-neighbour replication as the contrast case that preserves it.

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::ops::{upsample, UpsampleMode};
use crate::rng::Rng;
use crate::stats::moments;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Uniform,
    Spiky,
    Checker,
    Ramp,
}

const FAMILIES: [Family; 5] = [Family::Normal, Family::Uniform, Family::Spiky, Family::Checker, Family::Ramp];

/// A random tensor from one of several families. Every `H x W` plane is
/// non-constant.
pub fn random_subject(rng: &mut Rng, max_side: usize) -> Tensor {
    loop {
        let family = FAMILIES[rng.below(FAMILIES.len())];
        let shape = Shape {
            n: 1 + rng.below(2),
            c: 1 + rng.below(3),
            h: 1 + rng.below(max_side),
            w: 2 + rng.below(max_side.max(2) - 1),
        };
        let (mu, scale) = (rng.range(-5.0, 5.0), rng.range(0.01, 3.0));
        let mut data = vec![0.0; shape.numel()];
        let (fx, fy) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
        for (i, v) in data.iter_mut().enumerate() {
            let (y, x) = ((i / shape.w) % shape.h, i % shape.w);
            *v = mu + scale
                * match family {
                    Family::Normal => rng.standard_normal(),
                    Family::Uniform => rng.range(-1.0, 1.0),
                    Family::Spiky => {
                        if rng.uniform() < 0.1 {
                            rng.range(-20.0, 20.0)
                        } else {
                            0.0
                        }
                    }
                    Family::Checker => {
                        if (x + y) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    Family::Ramp => fx * x as f64 + fy * y as f64 + 0.01 * rng.standard_normal(),
                };
        }
        let t = Tensor::new(shape, data).expect("valid shape");
        let constant_plane = (0..shape.n).any(|n| {
            (0..shape.c).any(|c| {
                let p = t.plane(n, c);
                p.iter().all(|&v| v == p[0])
            })
        });
        if !constant_plane {
            return t;
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VarianceDecayReport {
    pub trials: usize,
    pub checks: usize,
    /// Bilinear cases where the variance did not drop.
    pub violations: usize,
    pub worst_ratio: f64,
    /// Largest `|Var[NN_r(X)] - Var[X]|` over integer ratios.
    pub nearest_max_gap: f64,
    pub first_violation: Option<String>,
}

pub fn run_variance_decay(config: &ExperimentConfig) -> Result<VarianceDecayReport> {
    let t = &config.variance_decay;
    let root = Rng::new(config.run.seed, 0).named("variance_decay");
    let per_trial: Vec<Result<VarianceDecayReport>> = (0..t.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.derive(i as u64);
            let x = random_subject(&mut rng, t.max_side);
            let before = moments(&x).variance;
            let mut rep = VarianceDecayReport { trials: 1, ..Default::default() };
            for &r in &t.ratios {
                for mode in [UpsampleMode::BILINEAR, UpsampleMode::BILINEAR_ALIGNED] {
                    let after = moments(&upsample(&x, r as f64, mode)?).variance;
                    rep.checks += 1;
                    rep.worst_ratio = rep.worst_ratio.max(after / before);
                    if !(after < before) && r > 1 {
                        rep.violations += 1;
                        rep.first_violation.get_or_insert_with(|| {
                            format!("trial {i} {} r={r} shape {}: {after} vs {before}", mode.label(), x.shape())
                        });
                    }
                }
                let nn = moments(&upsample(&x, r as f64, UpsampleMode::NEAREST)?).variance;
                rep.nearest_max_gap = rep.nearest_max_gap.max((nn - before).abs());
            }
            Ok(rep)
        })
        .collect();
    let mut total = VarianceDecayReport::default();
    for rep in per_trial {
        let rep = rep?;
        total.trials += rep.trials;
        total.checks += rep.checks;
        total.violations += rep.violations;
        total.worst_ratio = total.worst_ratio.max(rep.worst_ratio);
        total.nearest_max_gap = total.nearest_max_gap.max(rep.nearest_max_gap);
        if total.first_violation.is_none() {
            total.first_violation = rep.first_violation;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subjects_are_non_constant_per_plane() {
        let mut rng = Rng::new(2, 0);
        for _ in 0..200 {
            let x = random_subject(&mut rng, 6);
            let s = x.shape();
            for n in 0..s.n {
                for c in 0..s.c {
                    assert!(crate::stats::Moments::of(x.plane(n, c)).variance > 0.0);
                }
            }
        }
    }

    #[test]
    fn short_sweep_holds() {
        let mut c = ExperimentConfig::default();
        c.variance_decay.trials = 60;
        let rep = run_variance_decay(&c).unwrap();
        assert_eq!(rep.checks, 60 * 3 * 2);
        assert_eq!(rep.violations, 0, "{:?}", rep.first_violation);
        assert!(rep.worst_ratio < 1.0);
        assert!(rep.nearest_max_gap < 1e-12, "{}", rep.nearest_max_gap);
    }

    #[test]
    fn two_sample_row_by_hand() {
        // [0, 1] at r=2 half-pixel is [0, .25, .75, 1]: variance .15625 < .25
        let x = Tensor::row(&[0.0, 1.0]).unwrap();
        let up = upsample(&x, 2.0, UpsampleMode::BILINEAR).unwrap();
        assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert!((moments(&up).variance - 0.15625).abs() < 1e-15);
    }
}
