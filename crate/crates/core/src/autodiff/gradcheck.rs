//! Central-difference checks of every tape operator.

use super::{finite_diff_grad, ConvAttrs, NodeId, Op, Tape};
use crate::error::{Error, Result};
use crate::ops::{Kernel, UpsampleMode};
use crate::rng::{randn, Rng};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
/// Largest accepted `max|analytic - numeric| / max|numeric|`.
pub const FD_REL: f64 = 1e-5;
/// Inputs to a ReLU closer than this to zero are treated as kink hits.
pub const KINK: f64 = 1e-3;

pub type Build = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + Send + Sync;

/// Builds `sum(out * probe)` so every output element gets a distinct weight.
fn loss_of(build: &Build, inputs: &[Tensor], probe: &mut Option<Tensor>) -> Result<(Tape, Vec<NodeId>, NodeId)> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let dims = tape.value(out).shape().dims();
    let r = match probe {
        Some(p) => p.clone(),
        None => probe.insert(randn(dims, 0.0, 1.0, &mut Rng::new(99, 7))?).clone(),
    };
    let r = tape.constant(r);
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    Ok((tape, ids, loss))
}

fn near_kink(tape: &Tape) -> bool {
    tape.nodes().iter().any(|n| {
        matches!(n.op, Op::Relu) && tape.value(n.inputs[0]).data().iter().any(|v| v.abs() < KINK)
    })
}

/// Worst relative gap between analytic and central-difference gradients over
/// all inputs. Inputs are redrawn while any ReLU sees a near-zero argument.
pub fn max_rel_error(dims: &[[usize; 4]], build: &Build, seed: u64) -> Result<f64> {
    for attempt in 0..50u64 {
        let mut rng = Rng::new(seed, attempt);
        let inputs: Vec<Tensor> = dims.iter().map(|&d| randn(d, 0.0, 1.0, &mut rng)).collect::<Result<_>>()?;
        let mut probe = None;
        let (tape, ids, loss) = loss_of(build, &inputs, &mut probe)?;
        if near_kink(&tape) {
            continue;
        }
        let grads = tape.backward(loss)?;
        let mut worst: f64 = 0.0;
        for (k, &id) in ids.iter().enumerate() {
            let mut failure = None;
            let numeric = finite_diff_grad(
                |x| {
                    let mut xs = inputs.clone();
                    xs[k] = x.clone();
                    match loss_of(build, &xs, &mut probe.clone()) {
                        Ok((t, _, l)) => t.value(l).data()[0],
                        Err(e) => {
                            failure = Some(e);
                            f64::NAN
                        }
                    }
                },
                &inputs[k],
                FD_STEP,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
            worst = worst.max(grads[id].max_abs_diff(&numeric) / scale);
        }
        return Ok(worst);
    }
    Err(Error::Contract("could not draw kink-free inputs".into()))
}

pub struct GradCase {
    pub name: String,
    pub dims: Vec<[usize; 4]>,
    pub build: Box<Build>,
}

fn case(name: impl Into<String>, dims: &[[usize; 4]], build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + Send + Sync + 'static) -> GradCase {
    GradCase { name: name.into(), dims: dims.to_vec(), build: Box::new(build) }
}

/// One case per operator and configuration the decoders use.
pub fn standard_cases() -> Vec<GradCase> {
    const X: [usize; 4] = [2, 4, 6, 6];
    let mut cases = vec![
        case("conv2d same+bias", &[X, [3, 4, 3, 3], [1, 3, 1, 1]], |t, i| {
            t.conv2d(i[0], i[1], Some(i[2]), &ConvAttrs::same(3))
        }),
        case("conv2d strided dilated grouped", &[X, [4, 2, 3, 3]], |t, i| {
            t.conv2d(i[0], i[1], None, &ConvAttrs::new(3, 2, 2).with_groups(2))
        }),
        case("conv2d pointwise", &[X, [5, 4, 1, 1]], |t, i| t.conv2d(i[0], i[1], None, &ConvAttrs::same(1))),
        case("conv2d pad fill", &[X, [2, 4, 3, 3]], |t, i| {
            t.conv2d(i[0], i[1], None, &ConvAttrs::same(3).with_pad_fill(vec![0.5, -1.0, 2.0, 0.1]))
        }),
        case("batchnorm", &[X, [1, 4, 1, 1], [1, 4, 1, 1]], |t, i| t.batchnorm(i[0], i[1], i[2], 1e-5)),
        case("relu", &[X], |t, i| Ok(t.relu(i[0]))),
        case("concat", &[X, [2, 3, 6, 6]], |t, i| t.concat(&[i[0], i[1]])),
        case("add", &[X, X], |t, i| t.add(i[0], i[1])),
        case("mul", &[X, X], |t, i| t.mul(i[0], i[1])),
        case("affine", &[X], |t, i| Ok(t.affine(i[0], -2.5, 0.3))),
        case("sum", &[X], |t, i| Ok(t.sum(i[0]))),
        case("mean", &[X], |t, i| Ok(t.mean(i[0]))),
        case("sum_squares", &[X], |t, i| Ok(t.sum_squares(i[0]))),
    ];
    for mode in [UpsampleMode::BILINEAR, UpsampleMode::BILINEAR_ALIGNED, UpsampleMode::NEAREST] {
        cases.push(case(format!("upsample {} x2", mode.label()), &[X], move |t, i| t.upsample_to(i[0], 12, 12, mode)));
        cases.push(case(format!("upsample {} uneven", mode.label()), &[X], move |t, i| t.upsample_to(i[0], 9, 14, mode)));
        cases.push(case(format!("resize {} down", mode.label()), &[X], move |t, i| t.resize_to(i[0], 4, 3, mode)));
    }
    for (h, w) in [(1, 1), (2, 3), (4, 4)] {
        cases.push(case(format!("avgpool {h}x{w}"), &[X], move |t, i| t.avgpool_to(i[0], h, w)));
    }
    let labels: Vec<usize> = (0..2 * 36).map(|i| (i * 7 + i / 5) % 4).collect();
    cases.push(case("softmax cross-entropy", &[X], move |t, i| t.softmax_cross_entropy(i[0], &labels)));
    cases.push(case(
        "unit block composite",
        &[X, [4, 4, 3, 3], [1, 4, 1, 1], [1, 4, 1, 1], [2, 4, 6, 6], [3, 8, 1, 1]],
        |t, i| {
            let y = t.conv2d(i[0], i[1], None, &ConvAttrs::new(3, 2, 1))?;
            let y = t.batchnorm(y, i[2], i[3], 1e-5)?;
            let y = t.relu(y);
            let y = t.upsample_to(y, 6, 6, UpsampleMode::BILINEAR)?;
            let z = t.concat(&[y, i[4]])?;
            t.conv2d(z, i[5], None, &ConvAttrs::same(1))
        },
    ));
    cases
}

/// `|<UP(x), y> - <x, UP^T(y)>|`, largest over both bilinear grid conventions.
pub fn adjoint_gap(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed, 8);
    let mut worst: f64 = 0.0;
    for align in [false, true] {
        let mode = UpsampleMode { kernel: Kernel::Bilinear, align_corners: align };
        let x = randn([2, 3, 5, 7], 0.0, 1.0, &mut rng)?;
        let y = randn([2, 3, 15, 14], 0.0, 1.0, &mut rng)?;
        let mut t = Tape::new();
        let xi = t.param(x.clone());
        let up = t.upsample_to(xi, 15, 14, mode)?;
        let yc = t.constant(y.clone());
        let prod = t.mul(up, yc)?;
        let loss = t.sum(prod);
        let g = t.backward(loss)?;
        worst = worst.max((t.value(up).dot(&y) - x.dot(&g[xi])).abs());
    }
    Ok(worst)
}
