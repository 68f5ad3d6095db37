use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::recall::{Direction, RecallReport};
use crate::error::{Error, Result};
use crate::model::Preset;

/// Machine-readable result of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub preset: Preset,
    pub seed: u64,
    pub direction: Direction,
    pub n: usize,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub random_baseline: Vec<f64>,
}

impl RunReport {
    pub fn new(preset: Preset, seed: u64, report: &RecallReport) -> Self {
        Self {
            preset,
            seed,
            direction: report.direction,
            n: report.n,
            ks: report.ks.clone(),
            recall: report.recall.clone(),
            random_baseline: report.random_baseline.clone(),
        }
    }

    /// One JSON object on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn row_label(k: usize) -> String {
    if k == 1 {
        "Accuracy (Top 1)".to_string()
    } else {
        format!("Top {k} Recall")
    }
}

/// Recall table in percent: one row per k, a random-result column, then
/// one column per run. All runs must share ks and N.
pub fn format_table(runs: &[RunReport]) -> Result<String> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Parameter("no runs to tabulate".into()))?;
    if let Some(r) = runs.iter().find(|r| r.ks != first.ks || r.n != first.n) {
        return Err(Error::Parameter(format!(
            "runs disagree on ks or N: {:?}/{} vs {:?}/{}",
            first.ks, first.n, r.ks, r.n
        )));
    }
    let mut header = vec!["Random Result".to_string()];
    header.extend(runs.iter().map(|r| r.preset.label()));
    let labels: Vec<String> = first.ks.iter().map(|&k| row_label(k)).collect();
    let lw = labels.iter().map(String::len).max().unwrap_or(0);
    let cw: Vec<usize> = header.iter().map(|h| h.len().max(6)).collect();

    let mut out = String::new();
    write!(out, "{:lw$}", "").unwrap();
    for (h, w) in header.iter().zip(&cw) {
        write!(out, "  {h:>w$}").unwrap();
    }
    out.push('\n');
    for (i, label) in labels.iter().enumerate() {
        write!(out, "{label:lw$}").unwrap();
        let cells = std::iter::once(first.random_baseline[i]).chain(runs.iter().map(|r| r.recall[i]));
        for (v, w) in cells.zip(&cw) {
            write!(out, "  {:>w$.2}", 100.0 * v).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
