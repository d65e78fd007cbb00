use proptest::prelude::*;

use super::*;
use crate::autodiff::ConvAttrs;
use crate::decoders::{fuse, ConvUnitBlock, FusionSpec, HeadConfig, HeadKind};
use crate::ops::UpsampleMode;
use crate::rng::{randn, Rng};
use crate::stats::moments;

#[test]
fn equalize_arithmetic() {
    let x = Tensor::row(&[1.0, 3.0]).unwrap();
    assert_eq!(scale_equalize(&x, 2.0, 1.0).unwrap().into_data(), vec![-1.0, 1.0]);
    let y = randn([2, 3, 8, 8], 0.0, 1.0, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(scale_equalize(&y, 0.0, 1.0).unwrap(), y);
    assert!(matches!(scale_equalize(&y, 0.0, 0.0), Err(Error::DegenerateFeature { .. })));
    assert!(scale_equalize(&y, 0.0, -1.0).is_err());
}

#[test]
fn equalize_standardizes_samples() {
    let x = randn([4, 8, 32, 32], 1.7, 0.3, &mut Rng::new(1, 0)).unwrap();
    let m = moments(&scale_equalize(&x, 1.7, 0.3).unwrap());
    assert!(m.mean.abs() < 0.01);
    assert!((m.variance - 1.0).abs() < 0.01);
}

#[test]
fn two_scalar_samples() {
    let mut acc = StatsAccumulator::new(1);
    acc.push(&[(1.0, 1.0)]).unwrap();
    acc.push(&[(3.0, 9.0)]).unwrap();
    let s = acc.finalize(None).unwrap();
    let b = s.branches()[0];
    assert_eq!((b.mu, b.m2 / 2.0, b.sigma), (2.0, 5.0, 1.0));
}

#[test]
fn constant_branch_is_degenerate() {
    let mut acc = StatsAccumulator::new(2);
    for _ in 0..3 {
        acc.push(&[(1.0, 2.0), (4.0, 16.0)]).unwrap();
    }
    assert!(matches!(acc.finalize(None), Err(Error::DegenerateFeature { branch: 1, .. })));
    let s = acc.finalize(Some(1e-8)).unwrap();
    assert_eq!(s.branch(1).unwrap(), (4.0, 1e-8));
    assert!(matches!(StatsAccumulator::new(1).finalize(None), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn stats_ignore_sample_order(
        samples in proptest::collection::vec((-5.0f64..5.0, 0.1f64..3.0), 2..40),
        seed in any::<u64>(),
    ) {
        let rows: Vec<(f64, f64)> = samples.iter().map(|&(m, s)| (m, s * s + m * m)).collect();
        let mut a = StatsAccumulator::new(1);
        rows.iter().for_each(|r| a.push(&[*r]).unwrap());
        let mut shuffled = rows.clone();
        let mut rng = Rng::new(seed, 0);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.below(i + 1));
        }
        let mut b = StatsAccumulator::new(1);
        shuffled.iter().for_each(|r| b.push(&[*r]).unwrap());
        let (sa, sb) = (a.finalize(None).unwrap(), b.finalize(None).unwrap());
        let (ma, sa) = sa.branch(0).unwrap();
        let (mb, sb) = sb.branch(0).unwrap();
        prop_assert!((ma - mb).abs() < 1e-10 && (sa - sb).abs() < 1e-10);
    }

    #[test]
    fn merged_halves_match_single_pass(split in 1usize..19) {
        let mut rng = Rng::new(split as u64, 3);
        let rows: Vec<[(f64, f64); 2]> = (0..20)
            .map(|_| {
                let (a, b) = (rng.standard_normal(), rng.standard_normal());
                [(a, a * a + 1.0), (b, b * b + 2.0)]
            })
            .collect();
        let mut whole = StatsAccumulator::new(2);
        let (mut left, mut right) = (StatsAccumulator::new(2), StatsAccumulator::new(2));
        for (i, r) in rows.iter().enumerate() {
            whole.push(r).unwrap();
            if i < split { left.push(r).unwrap() } else { right.push(r).unwrap() }
        }
        left.merge(&right).unwrap();
        let (a, b) = (whole.finalize(None).unwrap(), left.finalize(None).unwrap());
        for i in 0..2 {
            let (x, y) = (a.branch(i).unwrap(), b.branch(i).unwrap());
            prop_assert!((x.0 - y.0).abs() < 1e-12 && (x.1 - y.1).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_calibration() {
    let w = randn([4, 6, 3, 3], 0.0, 1.0, &mut Rng::new(2, 0)).unwrap();
    let stats = GlobalStats::from_moments(&[(0.0, 1.0), (0.0, 1.0)], 10).unwrap();
    let p = ChannelPartition::from_sizes(&[2, 4]);
    let bias = vec![0.5, -0.5, 1.0, 0.0];
    let c = calibrate_weights(&w, Some(&bias), &stats, &p, false).unwrap();
    assert_eq!(c.weight, w);
    assert_eq!(c.bias.unwrap(), bias);
}

#[test]
fn single_branch_rescale() {
    let w = Tensor::scalar(4.0);
    let stats = GlobalStats::from_moments(&[(0.0, 2.0)], 1).unwrap();
    let c = calibrate_weights(&w, None, &stats, &ChannelPartition::from_sizes(&[1]), true).unwrap();
    assert_eq!(c.weight.data(), &[2.0]);
    assert!(c.bias.is_none());
}

#[test]
fn calibration_rejects_bad_partitions() {
    let w = randn([2, 4, 1, 1], 0.0, 1.0, &mut Rng::new(2, 0)).unwrap();
    let stats = GlobalStats::from_moments(&[(0.0, 1.0), (0.0, 1.0)], 1).unwrap();
    assert!(calibrate_weights(&w, None, &stats, &ChannelPartition::from_sizes(&[1, 2]), false).is_err());
    assert!(calibrate_weights(&w, None, &stats, &ChannelPartition::from_sizes(&[4]), false).is_err());
    assert!(GlobalStats::from_moments(&[(0.0, 0.0)], 1).is_err());
}

/// Largest pre-BN and post-BN gaps between injected and calibrated fusion.
fn equivalence_gap(seed: u64, k: usize, with_bias: bool, skip_bias: bool) -> (f64, f64) {
    let mut rng = Rng::new(seed, 11);
    let channels = vec![3, 2, 4];
    let ratios = vec![1.0, 2.0, 4.0];
    let mut block = ConvUnitBlock::new("fuse", 9, 5, k);
    if with_bias {
        block = block.with_bias();
    }
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng).unwrap();
    if with_bias {
        store.insert(block.bias_name(), randn([1, 5, 1, 1], 0.0, 1.0, &mut rng).unwrap());
    }
    let branches: Vec<Tensor> = [(8, 3), (4, 2), (2, 4)]
        .iter()
        .map(|&(hw, c)| randn([2, c, hw, hw], rng.range(-2.0, 2.0), rng.range(0.2, 3.0), &mut rng).unwrap())
        .collect();
    let pairs: Vec<(f64, f64)> = (0..3).map(|_| (rng.range(-1.0, 1.0), rng.range(0.1, 4.0))).collect();
    let stats = GlobalStats::from_moments(&pairs, 7).unwrap();
    let spec = FusionSpec::new(ratios, channels.clone(), block.clone(), UpsampleMode::BILINEAR).unwrap();

    let run = |spec: &FusionSpec, store: &ParamStore, eq: Equalization| {
        let mut g = Graph::bind(store, |_| false);
        let ids: Vec<_> = branches.iter().map(|b| g.tape.constant(b.clone())).collect();
        let out = fuse(&mut g, &ids, spec, eq).unwrap();
        (g.tape.value(out.pre_bn).clone(), g.tape.value(out.output).clone())
    };
    let (pre_a, post_a) = run(&spec, &store, Equalization::Injected(&stats));

    let mut cal_store = store.clone();
    let bias = with_bias.then(|| store.get(&block.bias_name()).unwrap().data().to_vec());
    let cal = calibrate_weights(
        store.get(&block.weight_name()).unwrap(),
        bias.as_deref(),
        &stats,
        &ChannelPartition::from_sizes(&channels),
        skip_bias,
    )
    .unwrap();
    cal_store.insert(block.weight_name(), cal.weight);
    let mut cal_block = block.clone().with_attrs(ConvAttrs::same(k).with_pad_fill(cal.pad_fill));
    if let Some(b) = cal.bias {
        cal_store.insert(block.bias_name(), Tensor::new(Shape::new(1, 5, 1, 1).unwrap(), b).unwrap());
        cal_block = cal_block.with_bias();
    }
    let cal_spec = FusionSpec { block: cal_block, ..spec };
    let (pre_b, post_b) = run(&cal_spec, &cal_store, Equalization::Off);
    (pre_a.max_abs_diff(&pre_b), post_a.max_abs_diff(&post_b))
}

#[test]
fn injected_and_calibrated_agree() {
    for seed in 0..12 {
        for k in [1, 3] {
            for with_bias in [false, true] {
                let (pre, post) = equivalence_gap(seed, k, with_bias, false);
                assert!(pre < 1e-10 && post < 1e-10, "seed {seed} k {k}: {pre:e} {post:e}");
                let (_, post) = equivalence_gap(seed, k, with_bias, true);
                assert!(post < 1e-10, "bias skipped, seed {seed} k {k}: {post:e}");
            }
        }
    }
}

#[test]
fn uperhead_stats_and_equalized_subjects() {
    let seg = Segmenter::new(HeadConfig::of(HeadKind::UperHead)).unwrap();
    let store = seg.init(&Rng::new(4, 0)).unwrap();
    let mut rng = Rng::new(4, 1);
    let batches: Vec<Tensor> = (0..3).map(|_| randn([2, 3, 64, 64], 0.0, 1.0, &mut rng).unwrap()).collect();
    let stats = accumulate_stats(&seg, &store, &batches, TapPoint::PostUpsample, None).unwrap();
    assert_eq!(stats.len(), 4);
    assert_eq!(stats.count(), 6);
    assert!(stats.branches().iter().all(|b| b.sigma > 0.0));

    let mut acc = StatsAccumulator::new(4);
    for b in &batches {
        let mut g = Graph::bind(&store, |_| false);
        let x = g.tape.constant(b.clone());
        let out = seg.forward(&mut g, x, Equalization::Injected(&stats)).unwrap();
        let (_, fused) = out.fusion.unwrap();
        let ts: Vec<&Tensor> = fused.inputs.iter().map(|&i| g.tape.value(i)).collect();
        acc.push_batch(&ts).unwrap();
    }
    for b in acc.finalize(None).unwrap().branches() {
        assert!(b.mu.abs() < 1e-6 && (b.sigma - 1.0).abs() < 1e-6, "{b:?}");
    }

    let enc = accumulate_stats(&seg, &store, &batches, TapPoint::EncoderFeature, None).unwrap();
    assert_eq!(enc.len(), 4);
    assert!(accumulate_stats(&seg, &store, &[], TapPoint::PostUpsample, None).is_err());
}

#[test]
fn calibrated_segmenter_matches_injected() {
    let mut seg = Segmenter::new(HeadConfig::of(HeadKind::PspHead)).unwrap();
    let mut store = seg.init(&Rng::new(9, 0)).unwrap();
    let batch = randn([2, 3, 48, 48], 0.0, 1.0, &mut Rng::new(9, 1)).unwrap();
    let stats = accumulate_stats(&seg, &store, std::slice::from_ref(&batch), TapPoint::PostUpsample, None).unwrap();
    let logits = |seg: &Segmenter, store: &ParamStore, eq| {
        let mut g = Graph::bind(store, |_| false);
        let x = g.tape.constant(batch.clone());
        let out = seg.forward(&mut g, x, eq).unwrap();
        g.tape.value(out.logits).clone()
    };
    let injected = logits(&seg, &store, Equalization::Injected(&stats));
    let groups = FusionSpec::new(
        vec![1.0; 5],
        vec![64, 32, 32, 32, 32],
        seg.fusion_block().unwrap().clone(),
        UpsampleMode::BILINEAR,
    )
    .unwrap()
    .partition();
    calibrate_segmenter(&mut seg, &mut store, &stats, &groups, true).unwrap();
    let calibrated = logits(&seg, &store, Equalization::Off);
    assert!(injected.max_abs_diff(&calibrated) < 1e-9);
}

#[test]
fn record_round_trip() {
    let s = GlobalStats::from_moments(&[(0.39, 0.58), (-1e-3, 2.5e-7), (1.0 / 3.0, 1.0)], 256).unwrap();
    let text = s.to_record().unwrap();
    assert!(text.starts_with("branch,mu,sigma,count\n"));
    let back = GlobalStats::from_record(&text).unwrap();
    assert_eq!(back.count(), 256);
    for i in 0..3 {
        assert_eq!(back.branch(i).unwrap(), s.branch(i).unwrap());
    }
}

#[test]
fn malformed_records() {
    for bad in [
        "",
        "branch,mu,sigma\n0,1,1\n",
        "branch,mu,sigma,count\n",
        "branch,mu,sigma,count\n1,0,1,3\n",
        "branch,mu,sigma,count\n0,0,0,3\n",
        "branch,mu,sigma,count\n0,0,1,3\n1,0,1,4\n",
        "branch,mu,sigma,count\n0,x,1,3\n",
        "branch,mu,sigma,count\n0,0,1,0\n",
    ] {
        assert!(matches!(GlobalStats::from_record(bad), Err(Error::Decode(_))), "{bad:?}");
    }
}
