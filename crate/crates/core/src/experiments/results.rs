//! Line-delimited JSON result records.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version string embedded in every record.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub variant: String,
    #[serde(rename = "L")]
    pub length: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub code_version: String,
    /// Optional per-record details, e.g. a benchmark row's memory peak or
    /// failure message.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Record {
    pub fn with(mut self, key: impl Into<String>, value: impl Into<serde_json::Value>) -> Self {
        self.extra.insert(key.into(), value.into());
        self
    }
}

/// Replay information shared by every record of one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunInfo {
    pub seed: u64,
    pub config_hash: String,
}

impl RunInfo {
    pub fn record(
        &self,
        variant: impl ToString,
        length: usize,
        metric: impl Into<String>,
        value: f64,
    ) -> Record {
        Record {
            variant: variant.to_string(),
            length,
            seed: self.seed,
            metric: metric.into(),
            value,
            config_hash: self.config_hash.clone(),
            code_version: CODE_VERSION.to_string(),
            extra: BTreeMap::new(),
        }
    }
}

/// Writes one JSON object per line. Non-finite values cannot be written.
pub fn write_records<'a>(
    out: &mut dyn Write,
    records: impl IntoIterator<Item = &'a Record>,
) -> Result<()> {
    for r in records {
        if !r.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "metric `{}` of `{}` is {}",
                r.metric, r.variant, r.value
            )));
        }
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io("<results>", e))?;
    }
    out.flush().map_err(|e| Error::io("<results>", e))
}

pub fn read_records(input: impl BufRead) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (no, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<results>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("results line {}: {e}", no + 1)))?,
        );
    }
    Ok(out)
}
