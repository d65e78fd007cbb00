use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// `[floor(i * len / out), ceil((i + 1) * len / out))`
pub fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

/// Adaptive average pooling to an `out_h x out_w` grid. Grids finer than the
/// input give overlapping single-pixel windows.
pub fn avgpool_to(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cannot pool {s} to {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let out_shape = s.with_spatial(out_h, out_w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for i in 0..out_h {
                let (y0, y1) = adaptive_window(i, s.h, out_h);
                for j in 0..out_w {
                    let (x0, x1) = adaptive_window(j, s.w, out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += plane[y * s.w + x0..y * s.w + x1].iter().sum::<f64>();
                    }
                    data.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
    }
    Ok(Tensor::from_op(out_shape, data, x.dtype()))
}

/// Adjoint of [`avgpool_to`].
pub fn avgpool_adjoint(grad_out: &Tensor, in_shape: Shape) -> Tensor {
    let g = grad_out.shape();
    if (g.h, g.w) == (in_shape.h, in_shape.w) {
        return grad_out.clone();
    }
    let mut data = vec![0.0; in_shape.numel()];
    for (idx, dst) in data.chunks_exact_mut(in_shape.plane()).enumerate() {
        let (n, c) = (idx / in_shape.c, idx % in_shape.c);
        let gp = grad_out.plane(n, c);
        for i in 0..g.h {
            let (y0, y1) = adaptive_window(i, in_shape.h, g.h);
            for j in 0..g.w {
                let (x0, x1) = adaptive_window(j, in_shape.w, g.w);
                let share = gp[i * g.w + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    dst[y * in_shape.w + x0..y * in_shape.w + x1]
                        .iter_mut()
                        .for_each(|v| *v += share);
                }
            }
        }
    }
    Tensor::from_op(in_shape, data, grad_out.dtype())
}
