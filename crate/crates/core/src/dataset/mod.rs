//! Patient records, variable partitioning, normalization, and serialization.
//!
//! A record holds a `rows x cols` grid of measurements where NaN marks an
//! unobserved entry and a parallel 0/1 mask says the same thing explicitly.
//! Padding rows (from left padding) carry mask 0 everywhere and are flagged
//! in `is_padding`.

mod psv;
mod synthetic;

pub use psv::{ingest_psv_dir, PsvOptions};
pub use synthetic::{generate, GeneratedData, SyntheticConfig};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Vital,
    Lab,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
}

#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`; NaN where unobserved.
    pub values: Vec<f64>,
    /// 1 where observed, 0 otherwise. Padding rows are all 0.
    pub mask: Vec<u8>,
    /// One flag per row; true for rows added by left padding.
    pub is_padding: Vec<bool>,
    pub demographics: Vec<f64>,
    pub label: u8,
}

impl PatientRecord {
    pub fn value(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.cols + v]
    }

    pub fn observed(&self, t: usize, v: usize) -> bool {
        self.mask[t * self.cols + v] == 1
    }

    /// Number of real (non-padding) time steps.
    pub fn valid_len(&self) -> usize {
        self.is_padding.iter().filter(|&&p| !p).count()
    }

    pub fn observed_count(&self, v: usize) -> usize {
        (0..self.rows).filter(|&t| self.observed(t, v)).count()
    }

    /// Mean of the observed values of one variable, if any.
    pub fn observed_mean(&self, v: usize) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for t in 0..self.rows {
            if self.observed(t, v) {
                sum += self.value(t, v);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    fn check(&self) -> Result<(), DataError> {
        if self.values.len() != self.rows * self.cols
            || self.mask.len() != self.rows * self.cols
            || self.is_padding.len() != self.rows
        {
            return Err(DataError::Invalid(format!("record {}: inconsistent buffer sizes", self.id)));
        }
        for (i, (&v, &m)) in self.values.iter().zip(&self.mask).enumerate() {
            if m == 1 && !v.is_finite() {
                return Err(DataError::Invalid(format!(
                    "record {}: masked-in entry {} is not finite",
                    self.id, i
                )));
            }
            if m > 1 {
                return Err(DataError::Invalid(format!("record {}: mask entry {} not 0/1", self.id, i)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub variables: Vec<VariableSpec>,
    pub demographic_names: Vec<String>,
    pub records: Vec<PatientRecord>,
}

impl Dataset {
    pub fn cols(&self) -> usize {
        self.variables.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for r in &self.records {
            if r.cols != self.variables.len() {
                return Err(DataError::Invalid(format!(
                    "record {} has {} variables, dataset has {}",
                    r.id,
                    r.cols,
                    self.variables.len()
                )));
            }
            if r.demographics.len() != self.demographic_names.len() {
                return Err(DataError::Invalid(format!(
                    "record {} has {} demographics, dataset has {}",
                    r.id,
                    r.demographics.len(),
                    self.demographic_names.len()
                )));
            }
            r.check()?;
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// Fraction of unobserved entries per variable, over the valid (non-padding)
/// steps of every record.
pub fn missing_ratios(records: &[PatientRecord], cols: usize) -> Vec<f64> {
    let mut observed = vec![0usize; cols];
    let mut total = vec![0usize; cols];
    for r in records {
        for t in 0..r.rows {
            if r.is_padding[t] {
                continue;
            }
            for v in 0..cols {
                total[v] += 1;
                if r.observed(t, v) {
                    observed[v] += 1;
                }
            }
        }
    }
    (0..cols)
        .map(|v| if total[v] == 0 { 1.0 } else { 1.0 - observed[v] as f64 / total[v] as f64 })
        .collect()
}

pub const DEFAULT_PARTITION_THRESHOLD: f64 = 0.65;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Declared vitals whose missing ratio exceeds this move to the lab path.
    pub threshold: f64,
    /// Explicit per-variable assignments; these always win.
    pub overrides: BTreeMap<String, VariableKind>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_PARTITION_THRESHOLD, overrides: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub vital_idx: Vec<usize>,
    pub lab_idx: Vec<usize>,
    /// Declared vitals demoted by the missing-ratio rule.
    pub moved_to_lab: Vec<usize>,
    pub ratios: Vec<f64>,
}

/// Routes variables to the dense (vital) or sparse (lab) path. Declared labs
/// never become vitals; declared vitals that are mostly missing are demoted
/// unless an override pins them.
pub fn partition(
    variables: &[VariableSpec],
    records: &[PatientRecord],
    cfg: &PartitionConfig,
) -> Partition {
    let ratios = missing_ratios(records, variables.len());
    let mut vital_idx = Vec::new();
    let mut lab_idx = Vec::new();
    let mut moved = Vec::new();
    for (i, spec) in variables.iter().enumerate() {
        let kind = match cfg.overrides.get(&spec.name) {
            Some(&k) => k,
            None => match spec.kind {
                VariableKind::Lab => VariableKind::Lab,
                VariableKind::Vital => {
                    if ratios[i] > cfg.threshold {
                        moved.push(i);
                        VariableKind::Lab
                    } else {
                        VariableKind::Vital
                    }
                }
            },
        };
        match kind {
            VariableKind::Vital => vital_idx.push(i),
            VariableKind::Lab => lab_idx.push(i),
        }
    }
    Partition { vital_idx, lab_idx, moved_to_lab: moved, ratios }
}

/// Per-variable z-score parameters fitted on observed entries only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; 0 marks a constant variable whose
    /// normalized values become 0.
    pub std: Vec<f64>,
    pub demo_mean: Vec<f64>,
    pub demo_std: Vec<f64>,
}

impl Normalizer {
    /// Fits on the observed entries of `records` (call with the training
    /// split only).
    pub fn fit(records: &[PatientRecord], cols: usize, demo_count: usize) -> Self {
        let mut sum = vec![0.0; cols];
        let mut sum2 = vec![0.0; cols];
        let mut n = vec![0usize; cols];
        for r in records {
            for t in 0..r.rows {
                for v in 0..cols {
                    if r.observed(t, v) {
                        let x = r.value(t, v);
                        sum[v] += x;
                        sum2[v] += x * x;
                        n[v] += 1;
                    }
                }
            }
        }
        let mut mean = vec![0.0; cols];
        let mut std = vec![0.0; cols];
        for v in 0..cols {
            if n[v] > 0 {
                mean[v] = sum[v] / n[v] as f64;
                let var = (sum2[v] / n[v] as f64 - mean[v] * mean[v]).max(0.0);
                let s = var.sqrt();
                std[v] = if s > 1e-12 { s } else { 0.0 };
            }
        }

        let mut demo_mean = vec![0.0; demo_count];
        let mut demo_std = vec![0.0; demo_count];
        for d in 0..demo_count {
            let vals: Vec<f64> = records
                .iter()
                .map(|r| r.demographics[d])
                .filter(|x| x.is_finite())
                .collect();
            if !vals.is_empty() {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                demo_mean[d] = m;
                let s = var.sqrt();
                demo_std[d] = if s > 1e-12 { s } else { 0.0 };
            }
        }
        Self { mean, std, demo_mean, demo_std }
    }

    /// Z-scores observed entries in place; unobserved entries stay NaN.
    /// Missing demographics are mean-filled before z-scoring.
    pub fn apply(&self, record: &mut PatientRecord) {
        for t in 0..record.rows {
            for v in 0..record.cols {
                if record.observed(t, v) {
                    let idx = t * record.cols + v;
                    record.values[idx] = if self.std[v] > 0.0 {
                        (record.values[idx] - self.mean[v]) / self.std[v]
                    } else {
                        0.0
                    };
                }
            }
        }
        for d in 0..record.demographics.len() {
            let raw = if record.demographics[d].is_finite() {
                record.demographics[d]
            } else {
                self.demo_mean[d]
            };
            record.demographics[d] =
                if self.demo_std[d] > 0.0 { (raw - self.demo_mean[d]) / self.demo_std[d] } else { 0.0 };
        }
    }

    pub fn apply_all(&self, records: &mut [PatientRecord]) {
        for r in records {
            self.apply(r);
        }
    }
}

/// Left-pads (or truncates to the most recent steps) so every record has
/// exactly `t_max` rows and the last real observation sits at row
/// `t_max - 1`. Padding rows are NaN-valued with mask 0.
pub fn pad_left(record: &mut PatientRecord, t_max: usize) {
    let cols = record.cols;
    if record.rows >= t_max {
        let drop = record.rows - t_max;
        record.values.drain(0..drop * cols);
        record.mask.drain(0..drop * cols);
        record.is_padding.drain(0..drop);
        record.rows = t_max;
        return;
    }
    let pad = t_max - record.rows;
    let mut values = vec![f64::NAN; pad * cols];
    values.extend_from_slice(&record.values);
    let mut mask = vec![0u8; pad * cols];
    mask.extend_from_slice(&record.mask);
    let mut is_padding = vec![true; pad];
    is_padding.extend_from_slice(&record.is_padding);
    record.values = values;
    record.mask = mask;
    record.is_padding = is_padding;
    record.rows = t_max;
}

pub fn pad_all(records: &mut [PatientRecord], t_max: usize) {
    for r in records {
        pad_left(r, t_max);
    }
}

/// A dataset made model-ready: partitioned, split, normalized on the train
/// statistics only, and left-padded to a fixed length.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub partition: Partition,
    pub split: SplitIndices,
    pub normalizer: Normalizer,
}

impl Prepared {
    pub fn subset(&self, idx: &[usize]) -> Vec<PatientRecord> {
        idx.iter().map(|&i| self.dataset.records[i].clone()).collect()
    }

    pub fn train_records(&self) -> Vec<PatientRecord> {
        self.subset(&self.split.train)
    }

    pub fn val_records(&self) -> Vec<PatientRecord> {
        self.subset(&self.split.val)
    }

    pub fn test_records(&self) -> Vec<PatientRecord> {
        self.subset(&self.split.test)
    }
}

pub fn prepare(
    mut dataset: Dataset,
    pcfg: &PartitionConfig,
    val_frac: f64,
    test_frac: f64,
    split_seed: u64,
    t_max: usize,
) -> Result<Prepared, DataError> {
    dataset.validate()?;
    let part = partition(&dataset.variables, &dataset.records, pcfg);
    let split = stratified_split(&dataset.labels(), val_frac, test_frac, split_seed)?;
    let train_records: Vec<PatientRecord> =
        split.train.iter().map(|&i| dataset.records[i].clone()).collect();
    let normalizer =
        Normalizer::fit(&train_records, dataset.cols(), dataset.demographic_names.len());
    normalizer.apply_all(&mut dataset.records);
    pad_all(&mut dataset.records, t_max);
    Ok(Prepared { dataset, partition: part, split, normalizer })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Label-stratified split; fractions apply within each class, remainder
/// goes to train. Deterministic for a given seed.
pub fn stratified_split(
    labels: &[u8],
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<SplitIndices, DataError> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(DataError::Invalid("split fractions must be in [0, 1) and sum below 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitIndices { train: vec![], val: vec![], test: vec![] };
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = (n as f64 * val_frac).round() as usize;
        let n_test = (n as f64 * test_frac).round() as usize;
        split.val.extend(&idx[..n_val]);
        split.test.extend(&idx[n_val..n_val + n_test]);
        split.train.extend(&idx[n_val + n_test..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Ground-truth generating mechanism of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mechanism {
    pub slope_coef: f64,
    pub lab_coef: f64,
    pub intercept: f64,
    /// Vital whose level and trend carry the label signal.
    pub informative_vital: usize,
    /// (driver, independent, coupled): coupled = 0.6 driver + 0.4 independent.
    pub coupled_triple: [usize; 3],
    /// Additional vitals mixing in the informative one, with coefficients.
    pub secondary_vital_mix: Vec<(usize, f64)>,
    /// Labs whose measured values reflect the latent severity, with
    /// coefficients.
    pub informative_labs: Vec<(usize, f64)>,
    /// Relative increase in lab panel ordering probability for positives.
    pub label_measurement_boost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub patients: usize,
    pub t_max: usize,
    pub variables: Vec<VariableSpec>,
    pub demographics: Vec<String>,
    pub seed: Option<u64>,
    pub positive_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mechanism: Option<Mechanism>,
    /// AUROC of the generator's own logit; an estimate of the attainable
    /// ceiling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bayes_auroc: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PatientRow {
    id: String,
    label: u8,
    demographics: Vec<Option<f64>>,
    values: Vec<Vec<Option<f64>>>,
}

/// One JSON object per line; unobserved entries and missing demographics
/// serialize as null. Padding rows are not serialized.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let io_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in &dataset.records {
        let mut values = Vec::with_capacity(r.valid_len());
        for t in 0..r.rows {
            if r.is_padding[t] {
                continue;
            }
            let row: Vec<Option<f64>> = (0..r.cols)
                .map(|v| r.observed(t, v).then(|| r.value(t, v)))
                .collect();
            values.push(row);
        }
        let row = PatientRow {
            id: r.id.clone(),
            label: r.label,
            demographics: r.demographics.iter().map(|&d| d.is_finite().then_some(d)).collect(),
            values,
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| DataError::Invalid(format!("serialize {}: {e}", r.id)))?;
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_jsonl(path: &Path, manifest: &Manifest) -> Result<Dataset, DataError> {
    let io_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let cols = manifest.variables.len();
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PatientRow = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            file: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let rows = row.values.len();
        let mut values = Vec::with_capacity(rows * cols);
        let mut mask = Vec::with_capacity(rows * cols);
        for (t, vrow) in row.values.iter().enumerate() {
            if vrow.len() != cols {
                return Err(DataError::Parse {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("step {} has {} values, expected {}", t, vrow.len(), cols),
                });
            }
            for &cell in vrow {
                match cell {
                    Some(x) => {
                        values.push(x);
                        mask.push(1);
                    }
                    None => {
                        values.push(f64::NAN);
                        mask.push(0);
                    }
                }
            }
        }
        let record = PatientRecord {
            id: row.id,
            rows,
            cols,
            values,
            mask,
            is_padding: vec![false; rows],
            demographics: row.demographics.iter().map(|d| d.unwrap_or(f64::NAN)).collect(),
            label: row.label,
        };
        records.push(record);
    }
    let dataset = Dataset {
        name: manifest.name.clone(),
        variables: manifest.variables.clone(),
        demographic_names: manifest.demographics.clone(),
        records,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), DataError> {
    let io_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| DataError::Invalid(format!("serialize manifest: {e}")))?;
    std::fs::write(path, json).map_err(io_err)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    let io_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let json = std::fs::read_to_string(path).map_err(io_err)?;
    serde_json::from_str(&json).map_err(|e| DataError::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, rows: usize, cols: usize, fill: impl Fn(usize, usize) -> Option<f64>) -> PatientRecord {
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for t in 0..rows {
            for v in 0..cols {
                match fill(t, v) {
                    Some(x) => {
                        values.push(x);
                        mask.push(1);
                    }
                    None => {
                        values.push(f64::NAN);
                        mask.push(0);
                    }
                }
            }
        }
        PatientRecord {
            id: id.into(),
            rows,
            cols,
            values,
            mask,
            is_padding: vec![false; rows],
            demographics: vec![50.0, 1.0],
            label: 0,
        }
    }

    #[test]
    fn missing_ratios_count_valid_steps_only() {
        let mut r = record("a", 4, 2, |t, v| (v == 0 || t % 2 == 0).then_some(1.0));
        // Variable 0 fully observed, variable 1 observed on even steps.
        assert_eq!(missing_ratios(&[r.clone()], 2), vec![0.0, 0.5]);
        // After left padding to 8 rows the ratios are unchanged.
        pad_left(&mut r, 8);
        assert_eq!(missing_ratios(&[r], 2), vec![0.0, 0.5]);
    }

    #[test]
    fn partition_demotes_sparse_vitals_and_respects_overrides() {
        let variables = vec![
            VariableSpec { name: "hr".into(), kind: VariableKind::Vital },
            VariableSpec { name: "etco2".into(), kind: VariableKind::Vital },
            VariableSpec { name: "lactate".into(), kind: VariableKind::Lab },
        ];
        // etco2 observed 1 of 10 steps: ratio 0.9 > 0.65 moves it to labs.
        let r = record("a", 10, 3, |t, v| match v {
            0 => Some(1.0),
            1 => (t == 0).then_some(1.0),
            _ => (t % 5 == 0).then_some(1.0),
        });
        let p = partition(&variables, &[r.clone()], &PartitionConfig::default());
        assert_eq!(p.vital_idx, vec![0]);
        assert_eq!(p.lab_idx, vec![1, 2]);
        assert_eq!(p.moved_to_lab, vec![1]);

        // An override pins etco2 to the vital path regardless of ratio.
        let mut cfg = PartitionConfig::default();
        cfg.overrides.insert("etco2".into(), VariableKind::Vital);
        let p = partition(&variables, &[r.clone()], &cfg);
        assert_eq!(p.vital_idx, vec![0, 1]);
        assert_eq!(p.moved_to_lab, Vec::<usize>::new());

        // A declared lab never moves to vitals by ratio, even when dense.
        let dense = record("b", 10, 3, |_, _| Some(1.0));
        let p = partition(&variables, &[dense], &PartitionConfig::default());
        assert_eq!(p.lab_idx, vec![2]);
    }

    #[test]
    fn normalizer_uses_observed_entries_and_zeroes_constants() {
        let r1 = record("a", 2, 2, |t, v| match (t, v) {
            (_, 0) => Some(10.0 + t as f64 * 20.0), // 10, 30
            (0, 1) => Some(7.0),                    // constant variable
            _ => None,
        });
        let r2 = record("b", 2, 2, |t, v| match (t, v) {
            (1, 0) => Some(40.0),
            (_, 1) => Some(7.0),
            _ => None,
        });
        let norm = Normalizer::fit(&[r1.clone(), r2.clone()], 2, 2);
        // Var 0 observed values: 10, 30, 40.
        let mean = (10.0 + 30.0 + 40.0) / 3.0;
        assert!((norm.mean[0] - mean).abs() < 1e-12);
        assert_eq!(norm.std[1], 0.0);

        let mut r = r1;
        norm.apply(&mut r);
        assert!((r.value(0, 0) - (10.0 - mean) / norm.std[0]).abs() < 1e-12);
        assert_eq!(r.value(0, 1), 0.0);
        assert!(r.value(1, 1).is_nan());
    }

    #[test]
    fn demographics_are_mean_filled_then_scored() {
        let mut r1 = record("a", 1, 1, |_, _| Some(1.0));
        let mut r2 = record("b", 1, 1, |_, _| Some(2.0));
        r1.demographics = vec![60.0, f64::NAN];
        r2.demographics = vec![80.0, 1.0];
        let norm = Normalizer::fit(&[r1.clone(), r2.clone()], 1, 2);
        norm.apply(&mut r1);
        // age 60 vs mean 70, std 10.
        assert!((r1.demographics[0] + 1.0).abs() < 1e-12);
        // Missing second demographic becomes the mean, then scores to 0;
        // its std is 0 (single observed value), so it collapses to 0 anyway.
        assert_eq!(r1.demographics[1], 0.0);
    }

    #[test]
    fn pad_left_puts_last_real_step_at_end() {
        let mut r = record("a", 3, 2, |t, _| Some(t as f64));
        pad_left(&mut r, 5);
        assert_eq!(r.rows, 5);
        assert_eq!(r.valid_len(), 3);
        assert!(r.is_padding[0] && r.is_padding[1]);
        assert!(!r.is_padding[2]);
        assert_eq!(r.value(4, 0), 2.0);
        assert_eq!(r.mask[0], 0);
        assert!(r.value(0, 0).is_nan());

        // Longer than t_max keeps the most recent rows.
        let mut long = record("b", 6, 1, |t, _| Some(t as f64));
        pad_left(&mut long, 4);
        assert_eq!(long.rows, 4);
        assert_eq!(long.value(0, 0), 2.0);
        assert_eq!(long.value(3, 0), 5.0);
        assert_eq!(long.valid_len(), 4);
    }

    #[test]
    fn stratified_split_is_deterministic_and_class_balanced() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 4 == 0)).collect();
        let s1 = stratified_split(&labels, 0.2, 0.2, 9).unwrap();
        let s2 = stratified_split(&labels, 0.2, 0.2, 9).unwrap();
        assert_eq!(s1.val, s2.val);
        assert_eq!(s1.test, s2.test);
        let pos_in = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(pos_in(&s1.val), 5);
        assert_eq!(pos_in(&s1.test), 5);
        assert_eq!(pos_in(&s1.train), 15);
        assert_eq!(s1.train.len() + s1.val.len() + s1.test.len(), 100);

        let s3 = stratified_split(&labels, 0.2, 0.2, 10).unwrap();
        assert_ne!(s1.val, s3.val);
    }

    #[test]
    fn jsonl_round_trip_preserves_values_and_masks() {
        let r = record("p1", 3, 2, |t, v| (t != 1 || v != 0).then(|| t as f64 + v as f64 * 0.5));
        let dataset = Dataset {
            name: "toy".into(),
            variables: vec![
                VariableSpec { name: "hr".into(), kind: VariableKind::Vital },
                VariableSpec { name: "lactate".into(), kind: VariableKind::Lab },
            ],
            demographic_names: vec!["age".into(), "sex".into()],
            records: vec![r],
        };
        let manifest = Manifest {
            name: "toy".into(),
            patients: 1,
            t_max: 3,
            variables: dataset.variables.clone(),
            demographics: dataset.demographic_names.clone(),
            seed: None,
            positive_rate: 0.0,
            mechanism: None,
            bayes_auroc: None,
        };
        let dir = std::env::temp_dir().join(format!("vital-jsonl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.jsonl");
        write_jsonl(&dataset, &path).unwrap();
        let back = read_jsonl(&path, &manifest).unwrap();
        std::fs::remove_dir_all(&dir).ok();

        assert_eq!(back.records.len(), 1);
        let b = &back.records[0];
        let a = &dataset.records[0];
        assert_eq!(b.mask, a.mask);
        for i in 0..a.values.len() {
            if a.mask[i] == 1 {
                assert_eq!(b.values[i], a.values[i]);
            } else {
                assert!(b.values[i].is_nan());
            }
        }
        assert_eq!(b.demographics, a.demographics);
    }
}
