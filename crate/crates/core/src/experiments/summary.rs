//! Run summaries and CSV output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

/// What every run leaves next to its CSVs.
#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub command: String,
    /// Component name to version, including the tensor file format.
    pub versions: BTreeMap<String, String>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub assertions: Vec<Assertion>,
    pub metrics: serde_json::Value,
}

impl Summary {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            versions: BTreeMap::from([
                ("scaleq".to_string(), env!("CARGO_PKG_VERSION").to_string()),
                ("seqt-format".to_string(), crate::io::VERSION.to_string()),
            ]),
            config_hash: config.hash(),
            config: config.clone(),
            assertions: Vec::new(),
            metrics: serde_json::Value::Null,
        }
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> &mut Self {
        self.assertions.push(Assertion::new(name, passed, detail));
        self
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Decode(e.to_string()))
    }
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Decode(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, csv_string(rows)?)?;
    Ok(())
}
