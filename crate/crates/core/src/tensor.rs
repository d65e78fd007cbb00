//! Dense batch x channel x height x width tensors.
//!
//! Storage is always `f64`; a tensor tagged [`DType::F32`] has every element
//! rounded through `f32`, and operators propagate that tag so a whole pipeline
//! can be run at single precision.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be positive, got ({n},{c},{h},{w})"
            )));
        }
        n.checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::InvalidShape(format!("({n},{c},{h},{w}) overflows")))?;
        Ok(Self { n, c, h, w })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Self { c, ..*self }
    }

    pub fn with_spatial(&self, h: usize, w: usize) -> Self {
        Self { h, w, ..*self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    /// Builds a tensor, rounding the data to `dtype`.
    pub fn with_dtype(shape: Shape, mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = DType::F32.round(*v));
        }
        Ok(Self { shape, dtype, data })
    }

    /// Infallible constructor for operator outputs whose length is known to match.
    pub(crate) fn from_op(shape: Shape, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        let mut t = Self { shape, dtype, data };
        if dtype == DType::F32 {
            t.data.iter_mut().for_each(|v| *v = DType::F32.round(*v));
        }
        t
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            dtype: DType::F64,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape { n: 1, c: 1, h: 1, w: 1 }, value)
    }

    /// Builds a tensor from the 1-D row `values`, shaped `(1,1,1,len)`.
    pub fn row(values: &[f64]) -> Result<Self> {
        Self::new(Shape::new(1, 1, 1, values.len())?, values.to_vec())
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, dtype: DType::F64, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// The `h x w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Overwrites the element at flat index `i`, rounded to this tensor's precision.
    pub fn set_flat(&mut self, i: usize, v: f64) {
        self.data[i] = self.dtype.round(v);
    }

    pub fn cast(&self, dtype: DType) -> Self {
        Self::from_op(self.shape, self.data.clone(), dtype)
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Self { shape, ..self.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_op(self.shape, self.data.iter().map(|&v| f(v)).collect(), self.dtype)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with [`Error::NonFinite`] naming `op` if any element is NaN or infinite.
    pub fn check_finite(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies channels `[start, start + len)` into a new tensor.
    pub fn channels(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.c {
            return Err(Error::ShapeMismatch(format!(
                "channel range {start}..{} out of {}",
                start + len,
                self.shape.c
            )));
        }
        let p = self.shape.plane();
        let mut data = Vec::with_capacity(self.shape.n * len * p);
        for n in 0..self.shape.n {
            let base = (n * self.shape.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Self::from_op(self.shape.with_channels(len), data, self.dtype))
    }

    /// Copies samples `[start, start + len)` into a new tensor.
    pub fn samples(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.n {
            return Err(Error::ShapeMismatch(format!(
                "sample range {start}..{} out of {}",
                start + len,
                self.shape.n
            )));
        }
        let per = self.shape.c * self.shape.plane();
        let data = self.data[start * per..(start + len) * per].to_vec();
        Ok(Self::from_op(Shape { n: len, ..self.shape }, data, self.dtype))
    }

    /// Stacks tensors of identical (c, h, w) along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero tensors".into()))?;
        let s = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in parts {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::ShapeMismatch(format!(
                    "stack: {} vs {}",
                    t.shape, s
                )));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_op(Shape { n, ..s }, data, first.dtype))
    }
}

/// Concatenates tensors along the channel axis, in input order.
pub fn concat_channels(xs: &[Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidShape("cannot concatenate zero tensors".into()))?;
    let s = first.shape;
    for t in xs {
        if (t.shape.n, t.shape.h, t.shape.w) != (s.n, s.h, s.w) {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: {} vs {}",
                t.shape, s
            )));
        }
    }
    let c: usize = xs.iter().map(|t| t.shape.c).sum();
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * c * p);
    for n in 0..s.n {
        for t in xs {
            let per = t.shape.c * p;
            data.extend_from_slice(&t.data[n * per..(n + 1) * per]);
        }
    }
    Ok(Tensor::from_op(s.with_channels(c), data, first.dtype))
}
