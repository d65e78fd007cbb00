//! 2-D cross-correlation with stride, dilation, groups and constant padding,
//! lowered to GEMM through im2col.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `(out_channels, in_channels / groups, kh, kw)`.
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    /// Per-input-channel value read at padded positions; zero padding when `None`.
    pub pad_fill: Option<Vec<f64>>,
}

impl ConvParams {
    /// Stride-1 convolution with "same" zero padding.
    pub fn same(weight: Tensor) -> Self {
        Self::strided(weight, 1, 1)
    }

    pub fn strided(weight: Tensor, stride: usize, dilation: usize) -> Self {
        let k = weight.shape().h;
        Self {
            padding: dilation * (k - 1) / 2,
            weight,
            bias: None,
            stride,
            dilation,
            groups: 1,
            pad_fill: None,
        }
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    pub fn geometry(&self, input: Shape) -> Result<ConvGeometry> {
        let w = self.weight.shape();
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::Contract(
                "stride, dilation and groups must be positive".into(),
            ));
        }
        if input.c % self.groups != 0 || w.n % self.groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "channels in={} out={} not divisible by groups={}",
                input.c, w.n, self.groups
            )));
        }
        if input.c / self.groups != w.c {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, weight {} expects {} per group x {} groups",
                input.c, w, w.c, self.groups
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != w.n {
                return Err(Error::ShapeMismatch(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    w.n
                )));
            }
        }
        if let Some(f) = &self.pad_fill {
            if f.len() != input.c {
                return Err(Error::ShapeMismatch(format!(
                    "pad fill has {} entries for {} input channels",
                    f.len(),
                    input.c
                )));
            }
        }
        let span = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * self.padding;
            let reach = self.dilation * (k - 1) + 1;
            if padded < reach {
                return Err(Error::ShapeMismatch(format!(
                    "kernel reach {reach} exceeds padded input {padded}"
                )));
            }
            Ok((padded - reach) / self.stride + 1)
        };
        Ok(ConvGeometry {
            input,
            out_h: span(input.h, w.h)?,
            out_w: span(input.w, w.w)?,
            kh: w.h,
            kw: w.w,
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
            groups: self.groups,
            out_c: w.n,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub input: Shape,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_c: usize,
}

impl ConvGeometry {
    pub fn output(&self) -> Shape {
        Shape { c: self.out_c, h: self.out_h, w: self.out_w, ..self.input }
    }

    fn cin_g(&self) -> usize {
        self.input.c / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_c / self.groups
    }

    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source coordinate for output position `o` and kernel tap `k`, or `None`
    /// when it lands in padding.
    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    /// Lowers group `g` of sample `n` into a `K x P` column matrix.
    fn im2col(&self, x: &Tensor, n: usize, g: usize, fill: Option<&[f64]>, cols: &mut [f64]) {
        let (p, s) = (self.p(), self.input);
        for ci in 0..self.cin_g() {
            let c = g * self.cin_g() + ci;
            let plane = x.plane(n, c);
            let pad = fill.map_or(0.0, |f| f[c]);
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    let dst = &mut cols[row..row + p];
                    for oy in 0..self.out_h {
                        let sy = self.source(oy, ky, s.h);
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match sy {
                            None => dst_row.iter_mut().for_each(|v| *v = pad),
                            Some(sy) => {
                                let src = &plane[sy * s.w..(sy + 1) * s.w];
                                for (ox, d) in dst_row.iter_mut().enumerate() {
                                    *d = self.source(ox, kx, s.w).map_or(pad, |sx| src[sx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a `K x P` column gradient into the input gradient, dropping padded taps.
    fn col2im(&self, dcols: &[f64], n: usize, g: usize, dx: &mut [f64]) {
        let (p, s) = (self.p(), self.input);
        for ci in 0..self.cin_g() {
            let c = g * self.cin_g() + ci;
            let base = (n * s.c + c) * s.plane();
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.out_h {
                        let Some(sy) = self.source(oy, ky, s.h) else { continue };
                        for ox in 0..self.out_w {
                            if let Some(sx) = self.source(ox, kx, s.w) {
                                dx[base + sy * s.w + sx] += dcols[row + oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)`, with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index the strides reach; callers pass
    // buffers sized from the same geometry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let geo = p.geometry(x.shape())?;
    let out_shape = geo.output();
    let (k, pp, cout_g) = (geo.k(), geo.p(), geo.cout_g());
    let mut out = vec![0.0; out_shape.numel()];
    let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { k * pp }];
    let wdata = p.weight.data();
    for n in 0..x.shape().n {
        for g in 0..geo.groups {
            let w_g = &wdata[g * cout_g * k..(g + 1) * cout_g * k];
            let start = (n * geo.out_c + g * cout_g) * pp;
            let dst = &mut out[start..start + cout_g * pp];
            let b: &[f64] = if geo.is_pointwise() {
                let s = (n * x.shape().c + g * geo.cin_g()) * pp;
                &x.data()[s..s + k * pp]
            } else {
                geo.im2col(x, n, g, p.pad_fill.as_deref(), &mut cols);
                &cols
            };
            gemm(cout_g, k, pp, w_g, (k as isize, 1), b, (pp as isize, 1), 0.0, dst);
        }
    }
    if let Some(bias) = &p.bias {
        for (i, plane) in out.chunks_exact_mut(pp).enumerate() {
            let bv = bias[i % geo.out_c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor::from_op(out_shape, out, x.dtype()))
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Gradients of `conv2d(x, p)` given the output gradient.
pub fn conv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let geo = p.geometry(x.shape())?;
    if grad_out.shape() != geo.output() {
        return Err(Error::ShapeMismatch(format!(
            "conv gradient {} vs output {}",
            grad_out.shape(),
            geo.output()
        )));
    }
    let (k, pp, cout_g) = (geo.k(), geo.p(), geo.cout_g());
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; p.weight.numel()];
    let mut cols = vec![0.0; k * pp];
    let mut dcols = vec![0.0; k * pp];
    let wdata = p.weight.data();
    for n in 0..x.shape().n {
        for g in 0..geo.groups {
            let w_g = &wdata[g * cout_g * k..(g + 1) * cout_g * k];
            let start = (n * geo.out_c + g * cout_g) * pp;
            let gy = &grad_out.data()[start..start + cout_g * pp];
            let b: &[f64] = if geo.is_pointwise() {
                let s = (n * x.shape().c + g * geo.cin_g()) * pp;
                &x.data()[s..s + k * pp]
            } else {
                geo.im2col(x, n, g, p.pad_fill.as_deref(), &mut cols);
                &cols
            };
            // dW_g += dY_g (cout_g x P) * cols^T (P x K)
            gemm(
                cout_g,
                pp,
                k,
                gy,
                (pp as isize, 1),
                b,
                (1, pp as isize),
                1.0,
                &mut dw[g * cout_g * k..(g + 1) * cout_g * k],
            );
            // dcols = W_g^T (K x cout_g) * dY_g (cout_g x P)
            gemm(k, cout_g, pp, w_g, (1, k as isize), gy, (pp as isize, 1), 0.0, &mut dcols);
            if geo.is_pointwise() {
                let s = (n * x.shape().c + g * geo.cin_g()) * pp;
                dx[s..s + k * pp]
                    .iter_mut()
                    .zip(&dcols)
                    .for_each(|(d, v)| *d += v);
            } else {
                geo.col2im(&dcols, n, g, &mut dx);
            }
        }
    }
    let mut db = vec![0.0; geo.out_c];
    for (i, plane) in grad_out.data().chunks_exact(pp).enumerate() {
        db[i % geo.out_c] += plane.iter().sum::<f64>();
    }
    Ok(ConvGrads {
        input: Tensor::from_op(x.shape(), dx, x.dtype()),
        weight: Tensor::from_op(p.weight.shape(), dw, p.weight.dtype()),
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};

    /// Direct nested-loop cross-correlation.
    fn direct(x: &Tensor, p: &ConvParams) -> Tensor {
        let s = x.shape();
        let w = p.weight.shape();
        let geo = p.geometry(s).unwrap();
        let (cin_g, cout_g) = (s.c / p.groups, w.n / p.groups);
        Tensor::from_fn(geo.output(), |n, o, oy, ox| {
            let g = o / cout_g;
            let mut acc = p.bias.as_ref().map_or(0.0, |b| b[o]);
            for ci in 0..cin_g {
                let c = g * cin_g + ci;
                for ky in 0..w.h {
                    for kx in 0..w.w {
                        let sy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                        let sx = (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                        let v = if sy < 0 || sx < 0 || sy >= s.h as isize || sx >= s.w as isize {
                            p.pad_fill.as_ref().map_or(0.0, |f| f[c])
                        } else {
                            x.at(n, c, sy as usize, sx as usize)
                        };
                        acc += p.weight.at(o, ci, ky, kx) * v;
                    }
                }
            }
            acc
        })
    }

    fn weight(o: usize, i: usize, k: usize, rng: &mut Rng) -> Tensor {
        randn([o, i, k, k], 0.0, 0.5, rng).unwrap()
    }

    #[test]
    fn pointwise_identity() {
        let x = randn([2, 3, 4, 5], 0.0, 1.0, &mut Rng::new(0, 0)).unwrap();
        let eye = Tensor::from_fn(Shape::new(3, 3, 1, 1).unwrap(), |o, i, _, _| (o == i) as u8 as f64);
        assert_eq!(conv2d(&x, &ConvParams::same(eye)).unwrap(), x);
    }

    #[test]
    fn box_filter_on_constant() {
        let c = 2.5;
        let x = Tensor::full(Shape::new(1, 1, 6, 6).unwrap(), c);
        let w = Tensor::full(Shape::new(1, 1, 3, 3).unwrap(), 1.0 / 9.0);
        let y = conv2d(&x, &ConvParams::same(w)).unwrap();
        for h in 1..5 {
            for w in 1..5 {
                assert!((y.at(0, 0, h, w) - c).abs() < 1e-14);
            }
        }
        // zero padding attenuates the border: corners see 4 of 9 taps
        assert!((y.at(0, 0, 0, 0) - c * 4.0 / 9.0).abs() < 1e-14);
        assert!((y.at(0, 0, 0, 2) - c * 6.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn dilated_matches_direct_on_7x7() {
        let mut rng = Rng::new(4, 0);
        let x = randn([1, 2, 7, 7], 0.0, 1.0, &mut rng).unwrap();
        let p = ConvParams::strided(weight(3, 2, 3, &mut rng), 1, 2);
        assert_eq!(p.padding, 2);
        let y = conv2d(&x, &p).unwrap();
        assert!(y.max_abs_diff(&direct(&x, &p)) < 1e-12);
    }

    #[test]
    fn matches_direct_over_configurations() {
        let mut rng = Rng::new(17, 0);
        for &(stride, dilation, groups, k) in &[
            (1, 1, 1, 1),
            (1, 1, 1, 3),
            (2, 1, 1, 3),
            (1, 2, 1, 3),
            (2, 2, 1, 3),
            (1, 1, 2, 3),
            (2, 1, 4, 3),
            (1, 3, 8, 3),
            (1, 12, 1, 3),
            (2, 1, 2, 1),
        ] {
            let x = randn([2, 8, 16, 16], 0.0, 1.0, &mut rng).unwrap();
            let mut p = ConvParams::strided(weight(8, 8 / groups, k, &mut rng), stride, dilation)
                .with_groups(groups)
                .with_bias((0..8).map(|i| i as f64 * 0.1).collect());
            let y = conv2d(&x, &p).unwrap();
            assert!(y.max_abs_diff(&direct(&x, &p)) < 1e-10, "{stride} {dilation} {groups} {k}");
            p.pad_fill = Some((0..8).map(|i| 0.3 * i as f64 - 1.0).collect());
            let y = conv2d(&x, &p).unwrap();
            assert!(y.max_abs_diff(&direct(&x, &p)) < 1e-10);
        }
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4).unwrap());
        let p = ConvParams::same(Tensor::zeros(Shape::new(2, 4, 3, 3).unwrap()));
        assert!(matches!(conv2d(&x, &p), Err(Error::ShapeMismatch(_))));
        let p = ConvParams::same(Tensor::zeros(Shape::new(2, 1, 3, 3).unwrap())).with_groups(2);
        assert!(conv2d(&x, &p).is_err());
    }

    #[test]
    fn backward_adjoint_identities() {
        // <conv(x), g> = <x, dX> + <bias terms> and = <w, dW> for bias-free convs.
        let mut rng = Rng::new(23, 0);
        for &(stride, dilation, groups) in &[(1, 1, 1), (2, 1, 2), (1, 2, 4)] {
            let x = randn([2, 4, 9, 9], 0.0, 1.0, &mut rng).unwrap();
            let p = ConvParams::strided(weight(4, 4 / groups, 3, &mut rng), stride, dilation)
                .with_groups(groups);
            let y = conv2d(&x, &p).unwrap();
            let g = randn(y.shape().dims(), 0.0, 1.0, &mut rng).unwrap();
            let grads = conv2d_backward(&x, &p, &g).unwrap();
            let lhs = y.dot(&g);
            assert!((lhs - x.dot(&grads.input)).abs() < 1e-9);
            assert!((lhs - p.weight.dot(&grads.weight)).abs() < 1e-9);
        }
    }
}
