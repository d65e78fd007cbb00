//! The full property suite behind the `check` command. Each stage runs one
//! experiment and turns its report into pass/fail assertions.

use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use super::summary::{csv_string, Assertion, Summary};
use super::{
    run_calibrate, run_constants, run_equivalence, run_fig2, run_head_audit, run_prop1, run_variance_decay, run_toy_train,
    AuditReport, CalibrationSummary, ConstantsReport, EquivalenceReport, Fig2Report, Prop1Report, VarianceDecayReport,
    TrainReport,
};
use crate::autodiff::gradcheck;
use crate::config::ExperimentConfig;
use crate::decoders::HeadKind;
use crate::error::Result;

pub const CONSTANTS_REL_TOL: f64 = 0.02;
pub const CONSTANTS_SECONDS: f64 = 60.0;
pub const NEAREST_GAP: f64 = 1e-12;
pub const PROP1_RATIO: f64 = 10.0;
pub const PROP1_REL_TOL: f64 = 0.05;
pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const ADJOINT_TOL: f64 = 1e-10;
pub const EQUALIZED_DEV: f64 = 1e-6;
pub const EQUALIZED_SPREAD_MAX: f64 = 1.5;
pub const BASELINE_SPREAD_MIN: f64 = 2.0;
pub const CALIBRATE_SECONDS: f64 = 120.0;
pub const LOSS_REDUCTION_MIN: f64 = 0.5;

/// Heads whose fusion has more than one subject.
pub const FUSING_HEADS: [HeadKind; 4] = [HeadKind::UperHead, HeadKind::PspHead, HeadKind::AsppHead, HeadKind::SepAsppHead];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Constants,
    VarianceDecay,
    Fig2,
    GradientRatio,
    Equivalence,
    Gradients,
    HeadAudit,
    Calibrate,
    Train,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Constants,
        Stage::VarianceDecay,
        Stage::Fig2,
        Stage::GradientRatio,
        Stage::Equivalence,
        Stage::Gradients,
        Stage::HeadAudit,
        Stage::Calibrate,
        Stage::Train,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Constants => "constants",
            Stage::VarianceDecay => "variance-decay",
            Stage::Fig2 => "fig2",
            Stage::GradientRatio => "gradient-ratio",
            Stage::Equivalence => "equivalence",
            Stage::Gradients => "gradients",
            Stage::HeadAudit => "head-audit",
            Stage::Calibrate => "calibrate",
            Stage::Train => "train",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub seconds: f64,
    pub assertions: Vec<Assertion>,
    pub metrics: Value,
}

impl StageOutcome {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

fn check(name: &str, passed: bool, detail: String) -> Assertion {
    Assertion::new(name, passed, detail)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

pub fn assess_constants(r: &ConstantsReport) -> Vec<Assertion> {
    vec![
        check("relu-bn mean", r.mean_rel_err < CONSTANTS_REL_TOL, format!("{} (rel {:.2e})", r.mean, r.mean_rel_err)),
        check(
            "relu-bn variance",
            r.variance_rel_err < CONSTANTS_REL_TOL,
            format!("{} (rel {:.2e})", r.variance, r.variance_rel_err),
        ),
        check("constants runtime", r.seconds < CONSTANTS_SECONDS, format!("{:.1} s", r.seconds)),
    ]
}

pub fn assess_variance_decay(r: &VarianceDecayReport) -> Vec<Assertion> {
    vec![
        check(
            "bilinear shrinks variance",
            r.violations == 0,
            format!("{} violations in {} checks, worst ratio {}", r.violations, r.checks, r.worst_ratio),
        ),
        check("nearest keeps variance", r.nearest_max_gap < NEAREST_GAP, format!("max gap {:e}", r.nearest_max_gap)),
    ]
}

pub fn assess_fig2(r: &Fig2Report, config: &ExperimentConfig) -> Vec<Assertion> {
    let f = &config.fig2;
    let per_sigma = f.ratios.len() * f.align.modes().len();
    let want = per_sigma * f.sigmas.len();
    let min = r.min_delta();
    vec![
        check("fig2 rows", r.rows.len() == want, format!("{} rows, expected {want}", r.rows.len())),
        check("fig2 reference rows", r.reference.len() == per_sigma, format!("{} rows", r.reference.len())),
        check("fig2 every cell decays", r.all_decrease() && min > 0.0, format!("min delta {min}")),
    ]
}

pub fn assess_prop1(r: &Prop1Report) -> Vec<Assertion> {
    [(false, PROP1_RATIO), (true, 1.0)]
        .into_iter()
        .map(|(eq, target)| {
            let got = r.pooled(PROP1_RATIO, eq).map(|p| p.grad_ratio);
            let ok = got.is_some_and(|g| (g / target - 1.0).abs() <= PROP1_REL_TOL);
            let name = if eq { "equalized gradient ratio" } else { "gradient ratio" };
            check(name, ok, format!("{got:?}, target {target}"))
        })
        .collect()
}

pub fn assess_equivalence(r: &EquivalenceReport) -> Vec<Assertion> {
    vec![
        check(
            "injected vs folded pre-bn",
            r.max_pre_bn < EQUIVALENCE_TOL,
            format!("max {:e} over {} cases", r.max_pre_bn, r.cases.len()),
        ),
        check(
            "injected vs folded post-bn, bias kept",
            r.max_post_bn_skip < EQUIVALENCE_TOL,
            format!("max {:e} over {} cases", r.max_post_bn_skip, r.cases.len()),
        ),
    ]
}

pub fn assess_audit(r: &AuditReport) -> Vec<Assertion> {
    let mut out = Vec::new();
    for h in r.heads.iter().filter(|h| FUSING_HEADS.contains(&h.head)) {
        let k = h.head.as_str();
        out.push(check(
            &format!("{k} r=1 subject dominates"),
            h.dominance_holds(),
            format!("{}/{} seeds, need {}", h.r1_max, h.seeds, h.required()),
        ));
        out.push(check(&format!("{k} equalized subjects"), h.eq_max_dev <= EQUALIZED_DEV, format!("max dev {:e}", h.eq_max_dev)));
        out.push(check(
            &format!("{k} equalized gradient spread"),
            h.eq_grad_spread <= EQUALIZED_SPREAD_MAX,
            format!("{:.3}", h.eq_grad_spread),
        ));
        out.push(check(
            &format!("{k} baseline gradient spread"),
            h.grad_spread >= BASELINE_SPREAD_MIN,
            format!("{:.3}", h.grad_spread),
        ));
    }
    out
}

pub fn assess_calibration(s: &CalibrationSummary) -> Vec<Assertion> {
    vec![
        check("calibration runtime", s.seconds < CALIBRATE_SECONDS, format!("{:.1} s over {} samples", s.seconds, s.samples)),
        check("calibrated sigmas positive", s.min_sigma > 0.0, format!("min {} over {} branches", s.min_sigma, s.branches)),
        check(
            "calibrated forward matches injected",
            s.pre_bn_gap < EQUIVALENCE_TOL && s.post_bn_skip_gap < EQUIVALENCE_TOL,
            format!("pre-bn {:e}, post-bn {:e}", s.pre_bn_gap, s.post_bn_skip_gap),
        ),
    ]
}

pub fn assess_train(r: &TrainReport) -> Vec<Assertion> {
    let mut out = Vec::new();
    for a in &r.arms {
        out.push(check(&format!("{} finite", a.arm), a.finite, String::new()));
        out.push(check(
            &format!("{} loss reduction", a.arm),
            a.loss_reduction >= LOSS_REDUCTION_MIN,
            format!("{:.4} -> {:.4} ({:.1}%)", a.initial_loss, a.final_loss, 100.0 * a.loss_reduction),
        ));
    }
    out
}

fn evaluate(stage: Stage, config: &ExperimentConfig) -> Result<(Vec<Assertion>, Value)> {
    Ok(match stage {
        Stage::Constants => {
            let r = run_constants(config)?;
            (assess_constants(&r), to_value(&r))
        }
        Stage::VarianceDecay => {
            let r = run_variance_decay(config)?;
            (assess_variance_decay(&r), to_value(&r))
        }
        Stage::Fig2 => {
            let r = run_fig2(config)?;
            let m = json!({ "min_delta": r.min_delta(), "cells": to_value(&r.cells), "monotonicity_flags": r.monotonicity_flags });
            (assess_fig2(&r, config), m)
        }
        Stage::GradientRatio => {
            let r = run_prop1(config)?;
            (assess_prop1(&r), to_value(&r.rows.iter().filter(|p| p.seed == "pooled").collect::<Vec<_>>()))
        }
        Stage::Equivalence => {
            let r = run_equivalence(config)?;
            let m = json!({ "cases": r.cases.len(), "max_pre_bn": r.max_pre_bn, "max_post_bn_skip": r.max_post_bn_skip });
            (assess_equivalence(&r), m)
        }
        Stage::Gradients => {
            let mut worst = (String::new(), 0.0f64);
            let mut per_case = serde_json::Map::new();
            for case in gradcheck::standard_cases() {
                let err = gradcheck::max_rel_error(&case.dims, case.build.as_ref(), config.run.seed)?;
                if err >= worst.1 {
                    worst = (case.name.clone(), err);
                }
                per_case.insert(case.name, json!(err));
            }
            let gap = gradcheck::adjoint_gap(config.run.seed)?;
            let out = vec![
                check("finite differences", worst.1 < gradcheck::FD_REL, format!("worst {} at {:e}", worst.0, worst.1)),
                check("bilinear adjoint", gap < ADJOINT_TOL, format!("{gap:e}")),
            ];
            (out, json!({ "cases": per_case, "adjoint_gap": gap }))
        }
        Stage::HeadAudit => {
            let r = run_head_audit(config)?;
            (assess_audit(&r), to_value(&r.heads))
        }
        Stage::Calibrate => {
            let s = run_calibrate(config)?.summary();
            (assess_calibration(&s), to_value(&s))
        }
        Stage::Train => {
            let first = run_toy_train(config)?;
            let again = run_toy_train(config)?;
            let mut out = assess_train(&first);
            out.push(check(
                "train csv reproducible",
                csv_string(&first.rows)? == csv_string(&again.rows)?,
                format!("{} rows", first.rows.len()),
            ));
            (out, to_value(&first.arms))
        }
    })
}

/// Runs one stage. Experiment errors come back as a failed assertion.
pub fn run_stage(stage: Stage, config: &ExperimentConfig) -> StageOutcome {
    let start = Instant::now();
    let (assertions, metrics) = evaluate(stage, config)
        .unwrap_or_else(|e| (vec![check(&format!("{} ran", stage.name()), false, e.to_string())], Value::Null));
    StageOutcome { stage, seconds: start.elapsed().as_secs_f64(), assertions, metrics }
}

/// Every stage in order; `progress` sees each outcome as it lands.
pub fn run_suite(config: &ExperimentConfig, mut progress: impl FnMut(&StageOutcome)) -> Summary {
    let mut summary = Summary::new("check", config);
    let mut metrics = serde_json::Map::new();
    for stage in Stage::ALL {
        let o = run_stage(stage, config);
        progress(&o);
        summary.assertions.extend(o.assertions.iter().map(|a| {
            Assertion::new(format!("{}: {}", stage.name(), a.name), a.passed, a.detail.clone())
        }));
        metrics.insert(stage.name().into(), json!({ "seconds": o.seconds, "metrics": o.metrics }));
    }
    summary.metrics = Value::Object(metrics);
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_errors_become_failures() {
        let mut c = ExperimentConfig::default();
        c.head.fcn_depth = 0;
        c.head.kind = HeadKind::FcnHead;
        c.calibrate.dataset = 4;
        let o = run_stage(Stage::Calibrate, &c);
        assert!(!o.passed());
        assert_eq!(o.assertions.len(), 1);
    }

    #[test]
    fn gradients_stage_passes() {
        let o = run_stage(Stage::Gradients, &ExperimentConfig::default());
        assert!(o.passed(), "{:?}", o.assertions);
        assert_eq!(o.assertions.len(), 2);
    }

    #[test]
    fn stage_names_are_distinct() {
        let mut names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), Stage::ALL.len());
    }
}
