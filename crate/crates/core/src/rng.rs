//! Seeded, split-stream random number generation.
//!
//! Every generator is a ChaCha8 keyed by the root seed and positioned on its
//! own stream, so a trial's draws depend only on `(seed, stream)` and never on
//! how trials are scheduled across threads.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on a child stream; independent of how much of `self`
    /// has been consumed.
    pub fn derive(&self, label: u64) -> Rng {
        Rng::new(self.seed, splitmix64(self.stream ^ splitmix64(label)))
    }

    pub fn named(&self, name: &str) -> Rng {
        self.derive(fnv1a(name))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], mean: f64, std: f64) {
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        for v in out {
            *v = mean + std * dist.sample(&mut self.inner);
        }
    }
}

/// I.i.d. normal tensor with the given mean and standard deviation.
pub fn randn(dims: [usize; 4], mean: f64, std: f64, rng: &mut Rng) -> Result<Tensor> {
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::Contract(format!(
            "randn needs finite mean and std >= 0, got mean={mean} std={std}"
        )));
    }
    let mut data = vec![0.0; shape.numel()];
    if std == 0.0 {
        data.iter_mut().for_each(|v| *v = mean);
    } else {
        rng.fill_normal(&mut data, mean, std);
    }
    Tensor::new(shape, data)
}

/// I.i.d. uniform tensor on `[lo, hi)`.
pub fn randu(dims: [usize; 4], lo: f64, hi: f64, rng: &mut Rng) -> Result<Tensor> {
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
    let data = (0..shape.numel()).map(|_| rng.range(lo, hi)).collect();
    Tensor::new(shape, data)
}
