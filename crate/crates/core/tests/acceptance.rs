//! End-to-end acceptance run at full size. Prints one PASS/FAIL line per
//! criterion straight to stdout, then fails if any criterion failed.

use std::io::Write;
use std::time::Instant;

use scaleq::autodiff::gradcheck;
use scaleq::decoders::HeadKind;
use scaleq::experiments::fig2::reference_sigma;
use scaleq::experiments::{
    csv_string, relu_bn_mean, relu_bn_variance, run_calibrate, run_constants, run_equivalence, run_fig2, run_head_audit,
    run_prop1, run_variance_decay, run_toy_train, write_csv,
};
use scaleq::ExperimentConfig;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn report(n: usize, title: &str, start: Instant, v: &Verdict) {
    let tag = if v.passed { "PASS" } else { "FAIL" };
    let line = format!("criterion {n} {tag}: {title} [{:.1} s] {}\n", start.elapsed().as_secs_f64(), v.detail);
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn constants(c: &ExperimentConfig) -> Verdict {
    assert!(c.constants.shape[1] >= 64);
    let r = run_constants(c).unwrap();
    let mean_err = (r.mean / 0.398_94 - 1.0).abs();
    let var_err = (r.variance / 0.340_85 - 1.0).abs();
    assert!((relu_bn_mean() - 0.398_94).abs() < 1e-5 && (relu_bn_variance() - 0.340_85).abs() < 1e-5);
    verdict(
        mean_err < 0.02 && var_err < 0.02 && r.seconds < 60.0,
        format!("mean {:.5} (rel {mean_err:.1e}), variance {:.5} (rel {var_err:.1e}), {:.1} s", r.mean, r.variance, r.seconds),
    )
}

fn variance_decay(c: &ExperimentConfig) -> Verdict {
    let r = run_variance_decay(c).unwrap();
    let complete = r.trials == 1000 && r.checks == 1000 * 3 * 2;
    verdict(
        complete && r.violations == 0 && r.nearest_max_gap < 1e-12,
        format!(
            "{} trials, {} bilinear checks, {} violations, worst ratio {:.4}, nearest gap {:.1e}",
            r.trials, r.checks, r.violations, r.worst_ratio, r.nearest_max_gap
        ),
    )
}

// (sigma, r, mode, var_after) from the first verified full-size run at seed 42
const FIG2_ANCHORS: [(f64, usize, &str, f64); 4] = [
    (0.1, 8, "bilinear", 0.004443619230253462),
    (0.5, 2, "bilinear", 0.09854436478593896),
    (0.5, 2, "bilinear_align_corners", 0.1115183561067969),
    (0.9, 4, "bilinear", 0.351658159000156),
];

fn fig2(c: &ExperimentConfig) -> Verdict {
    let r = run_fig2(c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_csv(&dir.path().join("fig2.csv"), &r.rows).unwrap();
    let text = std::fs::read_to_string(dir.path().join("fig2.csv")).unwrap();
    let csv_ok = text.starts_with("sigma,r,mode,var_before,var_after\n") && text.lines().count() == 1 + 3 * 9 * 2;
    let reference_ok = r.reference.len() == 3 * 2 && r.reference.iter().all(|row| row.sigma == reference_sigma());
    // every cell sits below sigma^2 by its own measured margin
    let cells_ok = r.cells.len() == 3 * 9 * 2
        && r.cells.iter().all(|cell| cell.delta > 0.0)
        && r.rows.iter().zip(&r.cells).all(|(row, cell)| {
            row.var_after <= row.sigma * row.sigma * (1.0 - cell.delta) * (1.0 + 1e-12)
        });
    let anchors_ok = FIG2_ANCHORS.iter().all(|&(sigma, ratio, mode, want)| {
        let line = format!("{sigma},{ratio},{mode},");
        text.lines()
            .find(|l| l.starts_with(&line))
            .and_then(|l| l.rsplit(',').next()?.parse::<f64>().ok())
            .is_some_and(|got| (got / want - 1.0).abs() < 1e-9)
    });
    verdict(
        csv_ok && reference_ok && cells_ok && anchors_ok && r.all_decrease(),
        format!(
            "{} rows, {} reference rows, anchors {anchors_ok}, min delta {:.4}, {} r-monotonicity flags",
            r.rows.len(),
            r.reference.len(),
            r.min_delta(),
            r.monotonicity_flags.len()
        ),
    )
}

fn gradient_ratio(c: &ExperimentConfig) -> Verdict {
    let r = run_prop1(c).unwrap();
    let seeds = r.rows.iter().filter(|row| row.input_ratio == 10.0 && !row.equalized && row.seed != "pooled").count();
    let base = r.pooled(10.0, false).unwrap().grad_ratio;
    let eq = r.pooled(10.0, true).unwrap().grad_ratio;
    verdict(
        seeds == 32 && (base / 10.0 - 1.0).abs() <= 0.05 && (eq - 1.0).abs() <= 0.05,
        format!("{seeds} seeds, ratio {base:.3} (target 10), equalized {eq:.4} (target 1)"),
    )
}

fn equivalence(c: &ExperimentConfig) -> Verdict {
    let r = run_equivalence(c).unwrap();
    verdict(
        r.cases.len() == 100 && r.max_pre_bn < 1e-10 && r.max_post_bn_skip < 1e-10,
        format!("{} configurations, pre-bn {:.1e}, post-bn bias kept {:.1e}", r.cases.len(), r.max_pre_bn, r.max_post_bn_skip),
    )
}

fn gradients() -> Verdict {
    let mut worst = (String::new(), 0.0f64);
    let cases = gradcheck::standard_cases();
    let n = cases.len();
    for case in cases {
        let err = gradcheck::max_rel_error(&case.dims, case.build.as_ref(), 2024).unwrap();
        if err > worst.1 {
            worst = (case.name, err);
        }
    }
    let gap = gradcheck::adjoint_gap(2024).unwrap();
    verdict(worst.1 < 1e-5 && gap < 1e-10, format!("{n} op cases, worst {} {:.1e}, adjoint gap {gap:.1e}", worst.0, worst.1))
}

fn head_audit(c: &ExperimentConfig) -> Verdict {
    let r = run_head_audit(c).unwrap();
    let mut passed = true;
    let mut parts = Vec::new();
    for kind in [HeadKind::UperHead, HeadKind::PspHead, HeadKind::AsppHead, HeadKind::SepAsppHead] {
        let h = r.head(kind).unwrap();
        let dominance = h.seeds == 32 && h.r1_max >= 30;
        let equalized = h.eq_max_dev <= 1e-6;
        let eq_spread = h.eq_grad_spread <= 1.5;
        let base_spread = h.grad_spread >= 2.0;
        passed &= dominance && equalized && eq_spread && base_spread;
        let mark = |ok: bool| if ok { "ok" } else { "NO" };
        parts.push(format!(
            "{}: r=1 max {}/32 {}, eq dev {:.0e} {}, spread eq {:.2} {} base {:.2} {}",
            kind.as_str(),
            h.r1_max,
            mark(dominance),
            h.eq_max_dev,
            mark(equalized),
            h.eq_grad_spread,
            mark(eq_spread),
            h.grad_spread,
            mark(base_spread)
        ));
    }
    verdict(passed, parts.join("; "))
}

fn calibrate(c: &ExperimentConfig) -> Verdict {
    assert_eq!(c.calibrate.dataset, 256);
    let cal = run_calibrate(c).unwrap();
    let sigmas: Vec<f64> = cal.stats.branches().iter().map(|b| b.sigma).collect();
    verdict(
        cal.samples == 256
            && cal.seconds < 120.0
            && sigmas.iter().all(|&s| s > 0.0)
            && cal.pre_bn_gap < 1e-10
            && cal.post_bn_skip_gap < 1e-10,
        format!(
            "{} samples in {:.1} s, sigmas {:?}, pre-bn {:.1e}, post-bn {:.1e}",
            cal.samples, cal.seconds, sigmas, cal.pre_bn_gap, cal.post_bn_skip_gap
        ),
    )
}

fn training(c: &ExperimentConfig) -> Verdict {
    assert_eq!(c.train.steps, 500);
    let a = run_toy_train(c).unwrap();
    let b = run_toy_train(c).unwrap();
    let identical = csv_string(&a.rows).unwrap() == csv_string(&b.rows).unwrap();
    let arms_ok = a.arms.len() == 2
        && a.arms.iter().all(|arm| arm.finite && arm.loss_reduction >= 0.5 && arm.final_loss.is_finite());
    let desc: Vec<String> = a
        .arms
        .iter()
        .map(|arm| format!("{} {:.3} -> {:.3} ({:.0}%)", arm.arm, arm.initial_loss, arm.final_loss, 100.0 * arm.loss_reduction))
        .collect();
    verdict(arms_ok && identical, format!("{}, rerun identical: {identical}", desc.join(", ")))
}

#[test]
fn acceptance() {
    let c = ExperimentConfig::default();
    assert_eq!(c.run.seed, 42);
    let mut failed = Vec::new();
    let mut run = |n: usize, title: &str, f: &dyn Fn() -> Verdict| {
        let start = Instant::now();
        let v = f();
        report(n, title, start, &v);
        if !v.passed {
            failed.push(n);
        }
    };
    run(1, "relu-bn constants", &|| constants(&c));
    run(2, "bilinear variance decay", &|| variance_decay(&c));
    run(3, "gaussian upsampling sweep", &|| fig2(&c));
    run(4, "two-branch gradient ratio", &|| gradient_ratio(&c));
    run(5, "injected vs folded equalizer", &|| equivalence(&c));
    run(6, "gradient correctness", &gradients);
    run(7, "decoder head audit", &|| head_audit(&c));
    run(8, "calibration end to end", &|| calibrate(&c));
    run(9, "toy training health", &|| training(&c));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
