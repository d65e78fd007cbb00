//! Population moments with exact merging.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Mean and population variance (divide by `count`) of a set of values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub count: u64,
}

impl Moments {
    /// Two-pass moments of a slice.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = neumaier(values.iter().copied()) / n;
        // the correction term absorbs the rounding error left in `mean`
        let ss = neumaier(values.iter().map(|&v| (v - mean) * (v - mean)));
        let comp = neumaier(values.iter().map(|&v| v - mean));
        let variance = ((ss - comp * comp / n) / n).max(0.0);
        Self { mean, variance, count: values.len() as u64 }
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Second raw moment `E[x^2]`.
    pub fn second_moment(&self) -> f64 {
        self.variance + self.mean * self.mean
    }

    /// Moments of the union of two disjoint sets (Chan et al. pairwise update).
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * nb / n;
        let m2 = self.variance * na + other.variance * nb + delta * delta * na * nb / n;
        Moments {
            mean,
            variance: (m2 / n).max(0.0),
            count: self.count + other.count,
        }
    }

    /// Merges in a fixed left-to-right order so results are reproducible.
    pub fn merge_all<'a>(parts: impl IntoIterator<Item = &'a Moments>) -> Moments {
        parts
            .into_iter()
            .fold(Moments::default(), |acc, m| acc.merge(m))
    }
}

/// Compensated sum; the error no longer grows with the number of terms.
fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Moments over every element of `x`.
pub fn moments(x: &Tensor) -> Moments {
    Moments::of(x.data())
}

/// Moments over the `N x H x W` slice of each channel.
pub fn channel_moments(x: &Tensor) -> Vec<Moments> {
    let s = x.shape();
    (0..s.c)
        .map(|c| Moments::merge_all(&(0..s.n).map(|n| Moments::of(x.plane(n, c))).collect::<Vec<_>>()))
        .collect()
}

/// Mean over samples of the per-plane spatial variance; zero for any tensor
/// that is constant within every `H x W` plane.
pub fn mean_spatial_variance(x: &Tensor) -> f64 {
    let s = x.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            total += Moments::of(x.plane(n, c)).variance;
        }
    }
    total / (s.n * s.c) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};
    use crate::tensor::{concat_channels, Shape};
    use proptest::prelude::*;

    #[test]
    fn constant_tensor() {
        let m = moments(&Tensor::full(Shape::new(2, 3, 4, 4).unwrap(), 3.5));
        assert_eq!(m.mean, 3.5);
        assert_eq!(m.variance, 0.0);
        assert_eq!(m.count, 96);
    }

    #[test]
    fn one_three() {
        let m = moments(&Tensor::row(&[1.0, 3.0]).unwrap());
        assert_eq!((m.mean, m.variance), (2.0, 1.0));
    }

    #[test]
    fn large_standard_normal() {
        let x = randn([4, 16, 64, 64], 0.0, 1.0, &mut Rng::new(42, 0)).unwrap();
        let m = moments(&x);
        assert!((m.variance - 1.0).abs() < 0.01, "{m:?}");
        assert!(m.mean.abs() < 0.01);
    }

    #[test]
    fn per_channel() {
        let s = Shape::new(2, 2, 3, 3).unwrap();
        let x = Tensor::from_fn(s, |_, c, _, _| c as f64);
        let ms = channel_moments(&x);
        assert_eq!((ms[0].mean, ms[0].variance), (0.0, 0.0));
        assert_eq!((ms[1].mean, ms[1].variance), (1.0, 0.0));
    }

    #[test]
    fn per_channel_randn_at_full_resolution() {
        let sigma = 0.5;
        let x = randn([16, 4, 128, 128], 0.4, sigma, &mut Rng::new(9, 1)).unwrap();
        for m in channel_moments(&x) {
            assert!((m.variance / (sigma * sigma) - 1.0).abs() < 0.02, "{m:?}");
        }
    }

    #[test]
    fn concatenation_keeps_channel_moments() {
        let mut rng = Rng::new(3, 0);
        let a = randn([2, 2, 5, 5], 0.0, 1.0, &mut rng).unwrap();
        let b = randn([2, 3, 5, 5], 1.0, 2.0, &mut rng).unwrap();
        let ab = concat_channels(&[a.clone(), b.clone()]).unwrap();
        let expect: Vec<_> = channel_moments(&a).into_iter().chain(channel_moments(&b)).collect();
        assert_eq!(channel_moments(&ab), expect);
    }

    #[test]
    fn spatially_constant_planes_have_zero_spatial_variance() {
        let s = Shape::new(3, 2, 4, 4).unwrap();
        let x = Tensor::from_fn(s, |n, c, _, _| (n * 7 + c) as f64);
        assert_eq!(mean_spatial_variance(&x), 0.0);
        assert!(moments(&x).variance > 0.0);
    }

    proptest! {
        #[test]
        fn duplication_keeps_variance(seed in any::<u64>(), c in 1usize..4, h in 1usize..6) {
            let x = randn([2, c, h, 3], 0.3, 1.7, &mut Rng::new(seed, 0)).unwrap();
            let xx = concat_channels(&[x.clone(), x.clone()]).unwrap();
            prop_assert!((moments(&xx).variance - moments(&x).variance).abs() < 1e-12);
        }

        #[test]
        fn merge_matches_pooled(
            a in prop::collection::vec(-1e3f64..1e3, 1..60),
            b in prop::collection::vec(-1e3f64..1e3, 1..60),
        ) {
            let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
            let direct = Moments::of(&joined);
            let merged = Moments::of(&a).merge(&Moments::of(&b));
            let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1.0);
            prop_assert!(rel(merged.mean, direct.mean) < 1e-10);
            prop_assert!(rel(merged.variance, direct.variance) < 1e-10);
            prop_assert_eq!(merged.count, direct.count);
            // order independence
            let swapped = Moments::of(&b).merge(&Moments::of(&a));
            prop_assert!(rel(swapped.variance, merged.variance) < 1e-10);
        }

        #[test]
        fn merge_is_associative(
            a in prop::collection::vec(-10f64..10.0, 1..20),
            b in prop::collection::vec(-10f64..10.0, 1..20),
            c in prop::collection::vec(-10f64..10.0, 1..20),
        ) {
            let (ma, mb, mc) = (Moments::of(&a), Moments::of(&b), Moments::of(&c));
            let left = ma.merge(&mb).merge(&mc);
            let right = ma.merge(&mb.merge(&mc));
            prop_assert!((left.mean - right.mean).abs() < 1e-12);
            prop_assert!((left.variance - right.variance).abs() < 1e-10);
            prop_assert!(left.variance >= 0.0);
        }
    }
}
