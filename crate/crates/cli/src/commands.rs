use std::fs;
use std::path::Path;

use scaleq::experiments::suite::{
    assess_audit, assess_calibration, assess_fig2, assess_prop1, assess_train,
};
use scaleq::experiments::{
    run_calibrate, run_fig2, run_head_audit, run_prop1, run_suite, run_toy_train, write_csv, Assertion,
    Summary,
};
use scaleq::{io, ExperimentConfig, Result, Shape, Tensor};
use serde_json::json;

use crate::Command;

/// Runs `command`, writes its artifacts plus `config.toml` and
/// `summary.json` under the configured output directory.
pub fn run(command: Command, config: &ExperimentConfig) -> Result<Summary> {
    let out = Path::new(&config.run.out);
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config.to_toml()?)?;
    let mut summary = Summary::new(command.name(), config);
    match command {
        Command::Fig2 => {
            let r = run_fig2(config)?;
            write_csv(&out.join("fig2.csv"), &r.rows)?;
            write_csv(&out.join("fig2_reference.csv"), &r.reference)?;
            write_csv(&out.join("fig2_cells.csv"), &r.cells)?;
            summary.assertions = assess_fig2(&r, config);
            summary.metrics = json!({ "min_delta": r.min_delta(), "monotonicity_flags": r.monotonicity_flags });
        }
        Command::Prop1 => {
            let r = run_prop1(config)?;
            write_csv(&out.join("prop1.csv"), &r.rows)?;
            summary.assertions = assess_prop1(&r);
        }
        Command::Audit => {
            let r = run_head_audit(config)?;
            write_csv(&out.join("head_audit.csv"), &r.rows)?;
            summary.assertions = assess_audit(&r);
            summary.metrics = serde_json::to_value(&r.heads).map_err(|e| scaleq::Error::Decode(e.to_string()))?;
        }
        Command::Train => {
            let r = run_toy_train(config)?;
            write_csv(&out.join("train.csv"), &r.rows)?;
            summary.assertions = assess_train(&r);
            summary.metrics = serde_json::to_value(&r.arms).map_err(|e| scaleq::Error::Decode(e.to_string()))?;
        }
        Command::Calibrate => {
            let cal = run_calibrate(config)?;
            fs::write(out.join("stats.csv"), cal.stats.to_record()?)?;
            write_checkpoint(&out.join("checkpoint"), &cal)?;
            let s = cal.summary();
            summary.assertions = assess_calibration(&s);
            summary.metrics = serde_json::to_value(&s).map_err(|e| scaleq::Error::Decode(e.to_string()))?;
        }
        Command::Check => {
            summary = run_suite(config, |o| {
                for a in &o.assertions {
                    let tag = if a.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {}: {} ({})", o.stage.name(), a.name, a.detail);
                }
            });
            let rows: Vec<CheckRow> = summary.assertions.iter().map(CheckRow::from).collect();
            write_csv(&out.join("check.csv"), &rows)?;
        }
    }
    summary.versions.insert("scaleq-cli".into(), env!("CARGO_PKG_VERSION").into());
    fs::write(out.join("summary.json"), summary.to_json()?)?;
    Ok(summary)
}

#[derive(serde::Serialize)]
struct CheckRow {
    name: String,
    passed: bool,
    detail: String,
}

impl From<&Assertion> for CheckRow {
    fn from(a: &Assertion) -> Self {
        Self { name: a.name.clone(), passed: a.passed, detail: a.detail.clone() }
    }
}

/// One `.seqt` file per parameter and a `manifest.txt` of `name file dims`.
/// The fusion padding fill is saved as `<block>.pad_fill`.
fn write_checkpoint(dir: &Path, cal: &scaleq::experiments::Calibration) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries: Vec<(String, Tensor)> = cal.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    if let Some(block) = cal.seg.fusion_block() {
        if let Some(fill) = block.attrs.pad_fill.clone() {
            let c = fill.len();
            entries.push((format!("{}.pad_fill", block.name), Tensor::new(Shape::new(1, c, 1, 1)?, fill)?));
        }
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut manifest = String::new();
    for (name, t) in &entries {
        let file = format!("{name}.seqt");
        io::save(t, dir.join(&file))?;
        let s = t.shape();
        manifest.push_str(&format!("{name} {file} {} {} {} {}\n", s.n, s.c, s.h, s.w));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}
