use crate::error::{Error, Result};
use crate::partition::ChannelPartition;
use crate::stats::Moments;
use crate::tensor::{DType, Tensor};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Result<Tensor> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.cast(DType::F64);
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.set_flat(i, orig + step);
        let up = f(&probe);
        probe.set_flat(i, orig - step);
        let down = f(&probe);
        probe.set_flat(i, orig);
        out.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape(), out)
}

/// Moments of the weight-gradient entries belonging to each input-channel
/// group of a `(O, I, kh, kw)` gradient.
pub fn grad_group_moments(grads: &Tensor, groups: &ChannelPartition) -> Result<Vec<Moments>> {
    let s = grads.shape();
    groups.validate(s.c)?;
    let k = s.plane();
    Ok(groups
        .groups()
        .iter()
        .map(|g| {
            let mut vals = Vec::with_capacity(s.n * g.len() * k);
            for o in 0..s.n {
                let row = &grads.data()[o * s.c * k..(o + 1) * s.c * k];
                vals.extend_from_slice(&row[g.start * k..g.end * k]);
            }
            Moments::of(&vals)
        })
        .collect())
}
