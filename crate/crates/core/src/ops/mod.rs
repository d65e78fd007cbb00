//! Forward operators on [`Tensor`]s. All are pure; outputs inherit the
//! precision tag of their first input.

mod batchnorm;
mod conv;
mod pool;
mod upsample;

pub use batchnorm::{batchnorm, normalization_stats, BatchNormParams, BnMode, DEFAULT_EPS};
pub use conv::{conv2d, conv2d_backward, ConvGeometry, ConvGrads, ConvParams};
pub use pool::{adaptive_window, avgpool_adjoint, avgpool_to};
pub use upsample::{
    axis_taps, resample_plane, resample_plane_adjoint, resize_to, scaled_len, upsample, upsample_adjoint,
    upsample_to, Kernel, Tap, UpsampleMode,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn same_shape(op: &str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!("{op}: {} vs {}", x.shape(), y.shape())));
    }
    Ok(())
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("add", x, y)?;
    let data = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::from_op(x.shape(), data, x.dtype()))
}

pub fn mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("mul", x, y)?;
    let data = x.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
    Ok(Tensor::from_op(x.shape(), data, x.dtype()))
}

/// `scale * x + shift`, elementwise.
pub fn affine(x: &Tensor, scale: f64, shift: f64) -> Tensor {
    x.map(|v| scale * v + shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};
    use crate::stats::moments;

    #[test]
    fn relu_basics() {
        let x = Tensor::row(&[-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).into_data(), vec![0.0, 2.0]);
        let neg = Tensor::row(&[-3.0, -0.5, -1e-9]).unwrap();
        let y = relu(&neg);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(moments(&y).variance, 0.0);
    }

    #[test]
    fn add_cases() {
        let x = randn([1, 2, 3, 3], 0.0, 1.0, &mut Rng::new(0, 0)).unwrap();
        let zero = Tensor::zeros(x.shape());
        assert_eq!(add(&x, &zero).unwrap(), x);
        let neg = affine(&x, -1.0, 0.0);
        assert!(add(&x, &neg).unwrap().data().iter().all(|&v| v == 0.0));
        let a = Tensor::row(&[1.0, 2.0]).unwrap();
        let b = Tensor::row(&[3.0, 4.0]).unwrap();
        assert_eq!(add(&a, &b).unwrap().into_data(), vec![4.0, 6.0]);
        assert!(add(&a, &x).is_err());
    }
}
