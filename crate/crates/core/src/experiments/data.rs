//! Procedural segmentation scenes: coloured discs, boxes and triangles on a
//! striped, noisy background. Class 0 is background.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `(1, 3, size, size)`.
    pub image: Tensor,
    /// Row-major labels in `[0, classes)`.
    pub mask: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Disc,
    Box,
    Triangle,
}

struct Blob {
    class: usize,
    kind: Kind,
    cy: f64,
    cx: f64,
    radius: f64,
    aspect: f64,
    color: [f64; 3],
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = ((y - self.cy) / self.radius, (x - self.cx) / self.radius);
        match self.kind {
            Kind::Disc => dy * dy + dx * dx <= 1.0,
            Kind::Box => dy.abs() <= self.aspect && dx.abs() <= 1.0 / self.aspect,
            // apex up, base at dy = 0.7
            Kind::Triangle => dy <= 0.7 && dy >= -1.0 && dx.abs() <= (dy + 1.0) / 1.7,
        }
    }
}

/// Fully saturated colour at `hue` in `[0, 1)`.
fn hue_rgb(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn scene(index: usize, classes: usize, size: usize, rng: &mut Rng) -> Result<SyntheticSample> {
    let s = size as f64;
    let fg = classes - 1;
    // the first scene carries every class so the dataset always covers them
    let count = (2 + rng.below(3)).max(if index == 0 { fg } else { 0 });
    let mut blobs: Vec<Blob> = (0..count)
        .map(|j| {
            let class = 1 + (index + j) % fg;
            let base = hue_rgb((class - 1) as f64 / fg as f64);
            let color = base.map(|c| 0.15 + 0.7 * c + rng.range(-0.08, 0.08));
            Blob {
                class,
                kind: [Kind::Disc, Kind::Box, Kind::Triangle][(class - 1) % 3],
                cy: rng.range(0.15, 0.85) * s,
                cx: rng.range(0.15, 0.85) * s,
                radius: rng.range(s / 7.0, s / 3.5),
                aspect: rng.range(0.7, 1.4),
                color,
            }
        })
        .collect();
    // large first so small shapes stay visible
    blobs.sort_by(|a, b| b.radius.total_cmp(&a.radius));

    let gray = rng.range(0.35, 0.65);
    let (freq, angle, phase) = (rng.range(0.2, 0.6), rng.range(0.0, std::f64::consts::PI), rng.range(0.0, 6.3));
    let (ca, sa) = (angle.cos(), angle.sin());
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    let mut mask = vec![0usize; plane];
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let stripe = 0.12 * (freq * (ca * xf + sa * yf) + phase).sin();
            let mut px = [gray + stripe; 3];
            if let Some(b) = blobs.iter().rev().find(|b| b.contains(yf, xf)) {
                px = b.color;
                mask[y * size + x] = b.class;
            }
            for (c, v) in px.iter().enumerate() {
                img[c * plane + y * size + x] = v + rng.normal(0.0, 0.05) - 0.5;
            }
        }
    }
    Ok(SyntheticSample { image: Tensor::new(Shape::new(1, 3, size, size)?, img)?, mask })
}

pub fn gen_synthetic_dataset(seed: u64, n: usize, classes: usize, size: usize) -> Result<Vec<SyntheticSample>> {
    gen_synthetic_with(&Rng::new(seed, 0).named("synthetic"), n, classes, size)
}

/// As [`gen_synthetic_dataset`], drawing from a caller-provided stream.
pub fn gen_synthetic_with(root: &Rng, n: usize, classes: usize, size: usize) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Contract("synthetic dataset needs at least one sample".into()));
    }
    if classes < 2 {
        return Err(Error::Contract(format!("need at least 2 classes, got {classes}")));
    }
    if size < 8 {
        return Err(Error::InvalidShape(format!("scene size {size} is below 8")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| scene(i, classes, size, &mut root.derive(i as u64)))
        .collect()
}

/// Fraction of all pixels carrying each class.
pub fn class_shares(samples: &[SyntheticSample], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut total = 0;
    for s in samples {
        for &l in &s.mask {
            counts[l] += 1;
        }
        total += s.mask.len();
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Images stacked along the batch axis and labels in matching order.
pub fn collate(samples: &[SyntheticSample]) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let labels = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Ok((Tensor::stack(&images)?, labels))
}

/// Consecutive batches of `batch` images; the last may be short.
pub fn image_batches(samples: &[SyntheticSample], batch: usize) -> Result<Vec<Tensor>> {
    samples.chunks(batch.max(1)).map(|c| collate(c).map(|(x, _)| x)).collect()
}
