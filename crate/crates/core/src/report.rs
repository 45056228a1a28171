//! Serializable experiment reports and their on-disk formats.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::protocol::SeedSummary;
use crate::train::{EpochStats, SplitMetrics};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid report: {0}")]
    Invalid(String),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv write failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Headline metrics artifact: every split evaluated, plus a per-seed
/// summary of one designated split when the experiment repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seeds: Vec<u64>,
    pub splits: Vec<SplitMetrics>,
    /// Which split the seed summary below tracks.
    pub summary_split: String,
    pub auroc: SeedSummary,
    pub auprc: SeedSummary,
}

impl MetricsReport {
    /// Report for a single run: the summary collapses to one value per
    /// metric, taken from the split named `summary_split`.
    pub fn single(seed: u64, splits: Vec<SplitMetrics>, summary_split: &str) -> Result<Self, ReportError> {
        let chosen = splits
            .iter()
            .find(|s| s.split == summary_split)
            .ok_or_else(|| ReportError::Invalid(format!("no split named {summary_split:?}")))?;
        let report = Self {
            seeds: vec![seed],
            splits: splits.clone(),
            summary_split: summary_split.to_string(),
            auroc: SeedSummary::from_values(vec![chosen.auroc]),
            auprc: SeedSummary::from_values(vec![chosen.auprc]),
        };
        report.validate()?;
        Ok(report)
    }

    /// Report aggregating one run per seed; `splits` carries the per-seed
    /// metrics of the summarized split, in seed order.
    pub fn across_seeds(seeds: Vec<u64>, splits: Vec<SplitMetrics>, summary_split: &str) -> Result<Self, ReportError> {
        if seeds.len() != splits.len() {
            return Err(ReportError::Invalid(format!(
                "{} seeds but {} split entries",
                seeds.len(),
                splits.len()
            )));
        }
        if seeds.is_empty() {
            return Err(ReportError::Invalid("no seeds".into()));
        }
        let report = Self {
            seeds,
            summary_split: summary_split.to_string(),
            auroc: SeedSummary::from_values(splits.iter().map(|s| s.auroc).collect()),
            auprc: SeedSummary::from_values(splits.iter().map(|s| s.auprc).collect()),
            splits,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        for s in &self.splits {
            for (name, v) in [("auroc", s.auroc), ("auprc", s.auprc)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ReportError::Invalid(format!(
                        "split {:?} {name} = {v} outside [0,1]",
                        s.split
                    )));
                }
            }
            if s.positives > s.n {
                return Err(ReportError::Invalid(format!(
                    "split {:?} has {} positives out of {}",
                    s.split, s.positives, s.n
                )));
            }
        }
        Ok(())
    }
}

/// Canonical JSON rendering: pretty-printed, trailing newline, no
/// timestamps or other run-local noise, so identical values serialize to
/// identical bytes.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let body = to_canonical_json(value)?;
    write_bytes(path, body.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let body = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&body)?)
}

/// Training history as CSV: one row per epoch with the cumulative
/// optimizer step count.
pub fn history_csv(history: &[EpochStats]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "step", "train_loss", "val_auroc", "val_auprc"])?;
    for e in history {
        w.write_record([
            e.epoch.to_string(),
            e.steps.to_string(),
            e.train_loss.to_string(),
            e.val_auroc.to_string(),
            e.val_auprc.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Invalid(e.to_string()))
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<(), ReportError> {
    let body = history_csv(history)?;
    write_bytes(path, body.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let io = |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}
