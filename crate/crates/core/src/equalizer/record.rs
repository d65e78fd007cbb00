//! Text form of [`GlobalStats`]: a CSV table `branch,mu,sigma,count`.

use serde::{Deserialize, Serialize};

use super::GlobalStats;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Row {
    branch: usize,
    mu: f64,
    sigma: f64,
    count: u64,
}

impl GlobalStats {
    pub fn to_record(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (branch, b) in self.branches.iter().enumerate() {
            w.serialize(Row { branch, mu: b.mu, sigma: b.sigma, count: self.count })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Decode(e.to_string()))
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| Error::Decode(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["branch", "mu", "sigma", "count"] {
            return Err(Error::Decode(format!("unexpected header {headers:?}")));
        }
        let mut pairs = Vec::new();
        let mut count = None;
        for (i, row) in r.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Decode(e.to_string()))?;
            if row.branch != i {
                return Err(Error::Decode(format!("row {i} names branch {}", row.branch)));
            }
            if *count.get_or_insert(row.count) != row.count {
                return Err(Error::Decode("rows disagree on sample count".into()));
            }
            pairs.push((row.mu, row.sigma));
        }
        let count = count.ok_or_else(|| Error::Decode("no branches".into()))?;
        GlobalStats::from_moments(&pairs, count).map_err(|e| match e {
            Error::DegenerateFeature { .. } | Error::Contract(_) => Error::Decode(e.to_string()),
            other => other,
        })
    }
}
