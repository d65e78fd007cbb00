use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{channel_moments, Moments};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    #[default]
    BatchStats,
    RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub mode: BnMode,
}

impl BatchNormParams {
    /// Freshly initialized layer: unit scale, zero shift.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
            mode: BnMode::BatchStats,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential update of the running statistics from one batch.
    pub fn update_running(&mut self, batch: &[Moments], momentum: f64) {
        for (c, m) in batch.iter().enumerate() {
            let unbiased = if m.count > 1 {
                m.variance * m.count as f64 / (m.count - 1) as f64
            } else {
                m.variance
            };
            self.running_mean[c] = (1.0 - momentum) * self.running_mean[c] + momentum * m.mean;
            self.running_var[c] = (1.0 - momentum) * self.running_var[c] + momentum * unbiased;
        }
    }
}

/// Per-channel normalization statistics `(mean, 1 / sqrt(var + eps))` that
/// `batchnorm` applies.
pub fn normalization_stats(x: &Tensor, p: &BatchNormParams) -> Result<Vec<(f64, f64)>> {
    let s = x.shape();
    if p.channels() != s.c || p.beta.len() != s.c {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm has {} channels, input {}",
            p.channels(),
            s
        )));
    }
    Ok(match p.mode {
        BnMode::BatchStats => {
            if s.n * s.plane() < 2 {
                return Err(Error::Contract(format!(
                    "batch statistics need at least 2 values per channel, input {s}"
                )));
            }
            channel_moments(x)
                .iter()
                .map(|m| (m.mean, 1.0 / (m.variance + p.eps).sqrt()))
                .collect()
        }
        BnMode::RunningStats => p
            .running_mean
            .iter()
            .zip(&p.running_var)
            .map(|(&m, &v)| (m, 1.0 / (v + p.eps).sqrt()))
            .collect(),
    })
}

pub fn batchnorm(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let stats = normalization_stats(x, p)?;
    let s = x.shape();
    let mut out = x.data().to_vec();
    for (i, plane) in out.chunks_exact_mut(s.plane()).enumerate() {
        let c = i % s.c;
        let (mean, inv) = stats[c];
        let (g, b) = (p.gamma[c], p.beta[c]);
        plane.iter_mut().for_each(|v| *v = (*v - mean) * inv * g + b);
    }
    Ok(Tensor::from_op(s, out, x.dtype()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};
    use crate::tensor::Shape;

    #[test]
    fn normalizes_each_channel() {
        let x = randn([4, 3, 8, 8], 2.0, 3.0, &mut Rng::new(0, 0)).unwrap();
        let y = batchnorm(&x, &BatchNormParams::new(3)).unwrap();
        for (mx, my) in channel_moments(&x).iter().zip(channel_moments(&y)) {
            assert!(my.mean.abs() < 1e-12);
            let expect = mx.variance / (mx.variance + DEFAULT_EPS);
            assert!((my.variance - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::full(Shape::new(2, 1, 3, 3).unwrap(), 4.2);
        let y = batchnorm(&x, &BatchNormParams::new(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_shift_and_scale() {
        let x = randn([4, 2, 8, 8], 0.0, 1.0, &mut Rng::new(1, 0)).unwrap();
        let mut p = BatchNormParams::new(2);
        p.gamma = vec![2.0, 2.0];
        p.beta = vec![3.0, 3.0];
        for m in channel_moments(&batchnorm(&x, &p).unwrap()) {
            assert!((m.mean - 3.0).abs() < 1e-12);
            assert!((m.variance - 4.0).abs() < 1e-4);
        }
    }

    #[test]
    fn channel_count_mismatch() {
        let x = Tensor::zeros(Shape::new(2, 3, 2, 2).unwrap());
        assert!(matches!(batchnorm(&x, &BatchNormParams::new(2)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn single_value_per_channel_rejected() {
        let x = Tensor::zeros(Shape::new(1, 3, 1, 1).unwrap());
        assert!(matches!(batchnorm(&x, &BatchNormParams::new(3)), Err(Error::Contract(_))));
    }

    #[test]
    fn running_mode_uses_stored_stats() {
        let x = Tensor::full(Shape::new(1, 1, 2, 2).unwrap(), 3.0);
        let mut p = BatchNormParams::new(1);
        p.mode = BnMode::RunningStats;
        p.running_mean = vec![1.0];
        p.running_var = vec![4.0 - p.eps];
        let y = batchnorm(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
