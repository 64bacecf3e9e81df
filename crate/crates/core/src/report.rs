// SPDX-License-Identifier: MIT OR Apache-2.0

//! Machine-readable experiment reports.
//!
//! A report is one JSON document (schema version [`REPORT_SCHEMA_VERSION`])
//! plus a tab-separated per-pair log. Nothing in either depends on wall
//! time or thread scheduling, so equal seeds give byte-identical files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{PairRecord, Summary};
use crate::search::GreedyResult;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Header of the per-pair log.
pub const PAIR_LOG_COLUMNS: [&str; 10] = [
    "pair",
    "reference_index",
    "counterfactual_index",
    "unexplained",
    "total",
    "loss_reference",
    "loss_patched",
    "loss_counterfactual",
    "loss_uniform",
    "loss_class_frequency",
];

/// One row of a per-position attribution table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub position: usize,
    pub token: Option<usize>,
    pub label: Option<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub command: String,
    pub hypothesis: String,
    pub counterfactual: String,
    pub dissimilarity: String,
    pub seed: u64,
    pub samples: usize,
    /// Conventions the numbers depend on.
    pub conventions: Vec<String>,
    pub warnings: Vec<String>,
    pub summary: Option<Summary>,
    pub pairs: Vec<PairRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution: Option<Vec<AttributionRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedy: Option<GreedyResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<RewriteCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

/// Outcome of verifying a rewrite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriteCheck {
    pub rewrite: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub nodes_before: usize,
    pub nodes_after: usize,
}

impl ExperimentReport {
    pub fn new(command: &str, seed: u64) -> Self {
        ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.to_owned(),
            hypothesis: String::new(),
            counterfactual: String::new(),
            dissimilarity: String::new(),
            seed,
            samples: 0,
            conventions: Vec::new(),
            warnings: Vec::new(),
            summary: None,
            pairs: Vec::new(),
            attribution: None,
            greedy: None,
            rewrite: None,
            values: None,
        }
    }

    /// Attach per-pair records and their summary, adding the standard
    /// warnings.
    pub fn set_records(&mut self, records: Vec<PairRecord>) -> Result<()> {
        let summary = Summary::from_records(&records)?;
        if summary.proportion_explained.is_none() {
            self.warnings
                .push("average total effect is 0; proportion explained is undefined".into());
        }
        if summary.diff_expected_loss.is_some() {
            self.warnings.push(
                "difference in expected loss averages before taking the absolute value, so \
                 per-example effects of opposite sign can cancel"
                    .into(),
            );
        }
        self.samples = records.len();
        self.summary = Some(summary);
        self.pairs = records;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: ExperimentReport =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "report schema version {} is not supported",
                report.schema_version
            )));
        }
        Ok(report)
    }

    /// Tab-separated per-pair log; empty cells for absent values.
    pub fn pair_log(&self) -> String {
        let mut out = PAIR_LOG_COLUMNS.join("\t");
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.pairs {
            let cells = [
                r.pair.to_string(),
                r.reference_index.to_string(),
                r.counterfactual_index.map(|c| c.to_string()).unwrap_or_default(),
                format!("{:?}", r.unexplained),
                format!("{:?}", r.total),
                opt(r.loss_reference),
                opt(r.loss_patched),
                opt(r.loss_counterfactual),
                opt(r.loss_uniform),
                opt(r.loss_class_frequency),
            ];
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    /// Write `report.json` and `pairs.tsv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("report.json"), &self.to_json())?;
        write_file(&dir.join("pairs.tsv"), &self.pair_log())
    }
}

/// Parse a per-pair log back into records.
pub fn parse_pair_log(text: &str) -> Result<Vec<PairRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty pair log".into()))?;
    if header.split('\t').ne(PAIR_LOG_COLUMNS) {
        return Err(Error::Format("unexpected pair log header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number `{s}`"))) };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
    let idx = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Format(format!("bad index `{s}`"))) };
    lines
        .map(|line| {
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != PAIR_LOG_COLUMNS.len() {
                return Err(Error::Format(format!("pair log row has {} cells", c.len())));
            }
            Ok(PairRecord {
                pair: idx(c[0])?,
                reference_index: idx(c[1])?,
                counterfactual_index: if c[2].is_empty() { None } else { Some(idx(c[2])?) },
                unexplained: num(c[3])?,
                total: num(c[4])?,
                loss_reference: opt(c[5])?,
                loss_patched: opt(c[6])?,
                loss_counterfactual: opt(c[7])?,
                loss_uniform: opt(c[8])?,
                loss_class_frequency: opt(c[9])?,
            })
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records() -> Vec<PairRecord> {
        (0..5)
            .map(|k| PairRecord {
                pair: k,
                reference_index: k * 2,
                counterfactual_index: if k == 3 { None } else { Some(k) },
                unexplained: 0.1 * k as f64 + 1.0 / 3.0,
                total: 1.0 + k as f64 / 7.0,
                loss_reference: Some(2.0 / 3.0),
                loss_patched: Some(1.0 + k as f64 / 9.0),
                loss_counterfactual: Some(3.5),
                loss_uniform: Some(5f64.ln()),
                loss_class_frequency: None,
            })
            .collect()
    }

    #[test]
    fn json_and_log_round_trip() {
        let mut r = ExperimentReport::new("patch", 7);
        r.set_records(records()).unwrap();
        let back = ExperimentReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(parse_pair_log(&r.pair_log()).unwrap(), r.pairs);
        let again = Summary::from_records(&back.pairs).unwrap();
        assert_eq!(Some(again), r.summary);
        assert!(r.warnings.iter().any(|w| w.contains("cancel")));
    }

    #[test]
    fn rejects_other_versions() {
        let mut r = ExperimentReport::new("patch", 1);
        r.schema_version = 2;
        assert!(matches!(ExperimentReport::from_json(&r.to_json()), Err(Error::Format(_))));
        assert!(parse_pair_log("nope\n").is_err());
    }
}
