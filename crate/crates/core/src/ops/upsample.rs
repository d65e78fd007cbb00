use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsampleMode {
    pub kernel: Kernel,
    pub align_corners: bool,
}

impl UpsampleMode {
    pub const BILINEAR: Self = Self { kernel: Kernel::Bilinear, align_corners: false };
    pub const BILINEAR_ALIGNED: Self = Self { kernel: Kernel::Bilinear, align_corners: true };
    pub const NEAREST: Self = Self { kernel: Kernel::Nearest, align_corners: false };

    pub fn label(&self) -> &'static str {
        match (self.kernel, self.align_corners) {
            (Kernel::Bilinear, false) => "bilinear",
            (Kernel::Bilinear, true) => "bilinear_align_corners",
            (Kernel::Nearest, false) => "nearest",
            (Kernel::Nearest, true) => "nearest_align_corners",
        }
    }
}

/// One output sample along an axis: `x[lo] + t * (x[hi] - x[lo])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

/// Interpolation taps mapping `in_len` samples onto `out_len`.
pub fn axis_taps(in_len: usize, out_len: usize, mode: UpsampleMode) -> Vec<Tap> {
    let last = in_len - 1;
    (0..out_len)
        .map(|i| match mode.kernel {
            Kernel::Bilinear => {
                let src = if mode.align_corners {
                    if out_len > 1 {
                        i as f64 * last as f64 / (out_len - 1) as f64
                    } else {
                        0.0
                    }
                } else {
                    ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0)
                };
                let lo = (src.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let t = if lo == hi { 0.0 } else { src - lo as f64 };
                Tap { lo, hi, t }
            }
            Kernel::Nearest => {
                let ratio_is_integer = out_len % in_len == 0;
                let src = if mode.align_corners && !ratio_is_integer && out_len > 1 {
                    (i as f64 * last as f64 / (out_len - 1) as f64).round() as usize
                } else {
                    ((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize
                };
                let lo = src.min(last);
                Tap { lo, hi: lo, t: 0.0 }
            }
        })
        .collect()
}

/// Resamples one `h x w` plane into `out` (`taps_y.len() x taps_x.len()`),
/// row pass first. `scratch` must hold `h * taps_x.len()` values.
pub fn resample_plane(
    src: &[f64],
    w: usize,
    taps_y: &[Tap],
    taps_x: &[Tap],
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let ow = taps_x.len();
    for (row, dst) in src.chunks_exact(w).zip(scratch.chunks_exact_mut(ow)) {
        for (d, tap) in dst.iter_mut().zip(taps_x) {
            let a = row[tap.lo];
            *d = a + tap.t * (row[tap.hi] - a);
        }
    }
    for (dst, tap) in out.chunks_exact_mut(ow).zip(taps_y) {
        let lo = &scratch[tap.lo * ow..(tap.lo + 1) * ow];
        let hi = &scratch[tap.hi * ow..(tap.hi + 1) * ow];
        for ((d, &a), &b) in dst.iter_mut().zip(lo).zip(hi) {
            *d = a + tap.t * (b - a);
        }
    }
}

/// Adjoint of [`resample_plane`]: scatters `grad_out` back onto the source grid,
/// accumulating into `grad_in`.
pub fn resample_plane_adjoint(
    grad_out: &[f64],
    w: usize,
    taps_y: &[Tap],
    taps_x: &[Tap],
    scratch: &mut [f64],
    grad_in: &mut [f64],
) {
    let ow = taps_x.len();
    scratch.iter_mut().for_each(|v| *v = 0.0);
    for (g, tap) in grad_out.chunks_exact(ow).zip(taps_y) {
        for (j, &gv) in g.iter().enumerate() {
            scratch[tap.lo * ow + j] += (1.0 - tap.t) * gv;
            scratch[tap.hi * ow + j] += tap.t * gv;
        }
    }
    for (s, dst) in scratch.chunks_exact(ow).zip(grad_in.chunks_exact_mut(w)) {
        for (&gv, tap) in s.iter().zip(taps_x) {
            dst[tap.lo] += (1.0 - tap.t) * gv;
            dst[tap.hi] += tap.t * gv;
        }
    }
}

/// Output size for ratio `r`, `round(r * len)`.
pub fn scaled_len(len: usize, r: f64) -> usize {
    (r * len as f64).round() as usize
}

/// Upsamples by ratio `r >= 1`; `r == 1` returns the input unchanged.
pub fn upsample(x: &Tensor, r: f64, mode: UpsampleMode) -> Result<Tensor> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::InvalidRatio(r));
    }
    if r == 1.0 {
        return Ok(x.clone());
    }
    let s = x.shape();
    upsample_to(x, scaled_len(s.h, r), scaled_len(s.w, r), mode)
}

/// Upsamples to an explicit output size no smaller than the input.
pub fn upsample_to(x: &Tensor, out_h: usize, out_w: usize, mode: UpsampleMode) -> Result<Tensor> {
    let s = x.shape();
    if out_h < s.h || out_w < s.w {
        return Err(Error::InvalidRatio(
            (out_h as f64 / s.h as f64).min(out_w as f64 / s.w as f64),
        ));
    }
    resize_to(x, out_h, out_w, mode)
}

/// Resampling to any positive size with the same sampling grid as
/// [`upsample_to`]; shrinking samples without antialiasing.
pub fn resize_to(x: &Tensor, out_h: usize, out_w: usize, mode: UpsampleMode) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape(format!("cannot resize {s} to {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let taps_y = axis_taps(s.h, out_h, mode);
    let taps_x = axis_taps(s.w, out_w, mode);
    let out_shape = s.with_spatial(out_h, out_w);
    let plane = out_h * out_w;
    let mut data = vec![0.0; out_shape.numel()];
    let mut scratch = vec![0.0; s.h * out_w];
    for (i, dst) in data.chunks_exact_mut(plane).enumerate() {
        let (n, c) = (i / s.c, i % s.c);
        resample_plane(x.plane(n, c), s.w, &taps_y, &taps_x, &mut scratch, dst);
    }
    Ok(Tensor::from_op(out_shape, data, x.dtype()))
}

/// Adjoint of [`upsample_to`] for a gradient shaped like its output.
pub fn upsample_adjoint(grad_out: &Tensor, in_shape: Shape, mode: UpsampleMode) -> Tensor {
    let g = grad_out.shape();
    if (g.h, g.w) == (in_shape.h, in_shape.w) {
        return grad_out.clone();
    }
    let taps_y = axis_taps(in_shape.h, g.h, mode);
    let taps_x = axis_taps(in_shape.w, g.w, mode);
    let mut data = vec![0.0; in_shape.numel()];
    let mut scratch = vec![0.0; in_shape.h * g.w];
    for (i, dst) in data.chunks_exact_mut(in_shape.plane()).enumerate() {
        let (n, c) = (i / g.c, i % g.c);
        resample_plane_adjoint(grad_out.plane(n, c), in_shape.w, &taps_y, &taps_x, &mut scratch, dst);
    }
    Tensor::from_op(in_shape, data, grad_out.dtype())
}
